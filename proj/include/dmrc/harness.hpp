#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dmrc/model.hpp"

namespace dmrc {

struct TrainConfig {
  int batch_size = 8;
  double learning_rate = 3e-4;
  int max_seq_len = 128;
  int epochs = 20;
  uint64_t seed = 1;
  double warmup_fraction = 0.1;
  int split_stride = 2;  // utterance overlap between adjacent pieces
  std::string variant = "full";
  size_t max_vocab = 2000;

  void validate() const;
};

Ablation ablation_from_variant(const std::string& variant);

/// Named hyperparameter presets. "desk" is the working configuration;
/// "molweni-paper" and "friendsqa-paper" record the full-scale settings.
void apply_preset(const std::string& name, ModelConfig& mc, TrainConfig& tc);

// ---- answer scoring --------------------------------------------------------

/// Lowercase, strip punctuation and articles, collapse whitespace.
std::string normalize_answer(const std::string& s);
double exact_match(const std::string& prediction, const std::string& gold);
double token_f1(const std::string& prediction, const std::string& gold);
/// Max over gold strings; empty golds mean unanswerable (empty prediction wins).
std::pair<double, double> score_prediction(const std::string& prediction,
                                           const std::vector<std::string>& golds);

// ---- long-context splitting ------------------------------------------------

struct Piece {
  Dialogue dialogue;   // the sub-dialogue
  Question question;   // spans re-indexed; answerable=false when gold absent
  PackedInput packed;
  int utt_offset = 0;    // original index of the first utterance
  int token_offset = 0;  // context-token offset of the first utterance
};

std::vector<Piece> split_long_context(const Dialogue& dialogue, const Question& question,
                                      const Vocabulary& vocab, int max_len, int stride,
                                      std::vector<std::string>* warnings = nullptr);

struct MergedPrediction {
  std::string answer_text;
  int start = 0, end = 0;  // original context-token coordinates
  double score = 0.0;
  double p_a = -1.0;
  int piece_index = 0;
};

MergedPrediction merge_predictions(const std::vector<Piece>& pieces,
                                   const std::vector<SpanPrediction>& preds);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::map<std::string, std::pair<ag::Mat, ag::Mat>> moments;
  long step = 0;
};

/// Linear warmup to peak then linear decay to zero.
double lr_schedule(double peak, long step, long total_steps, double warmup_fraction);

void adam_step(Model& model, AdamState& state, double lr, double grad_scale,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// ---- training & evaluation -------------------------------------------------

struct StepLog {
  long step = 0;
  double total = 0, l_u = 0, l_s = 0, l_se = 0, l_a = 0;
};

struct TrainResult {
  std::vector<StepLog> trajectory;
};

/// Trains in place. Per-step JSON-line logs go to `log` when non-null.
/// Parameters are float32-quantized at the end so a saved checkpoint and the
/// in-memory model agree exactly.
TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

struct BucketStats {
  long count = 0;
  double em_sum = 0.0;
  double f1_sum = 0.0;
  double em() const { return count ? 100.0 * em_sum / count : 0.0; }
  double f1() const { return count ? 100.0 * f1_sum / count : 0.0; }
};

struct EvalReport {
  long count = 0;
  double em = 0.0;  // percentages in [0, 100]
  double f1 = 0.0;
  std::map<std::string, BucketStats> by_type;
  std::map<std::string, BucketStats> by_speaker_count;
  std::map<std::string, BucketStats> by_utterance_count;
  double speaker_accuracy = -1.0;  // -1 when the head is absent
  long speaker_pairs = 0;
  double key_utterance_accuracy = -1.0;
  long key_utterance_count = 0;

  std::string to_json() const;
};

EvalReport evaluate(const Model& model, const Corpus& corpus, const TrainConfig& cfg,
                    uint64_t aux_seed = 1234);

/// question id -> {answer_text, a_s, a_e, score, p_a}
std::string predict_corpus_json(const Model& model, const Corpus& corpus, const TrainConfig& cfg);

/// Trains a fresh model of the requested variant and evaluates it.
EvalReport ablate(const std::string& variant, const Corpus& train_corpus,
                  const Corpus& test_corpus, const ModelConfig& mc, const TrainConfig& tc,
                  std::ostream* log = nullptr, Model* out_model = nullptr);

/// Distinct canonical speaker names, sorted (lookup order for speaker_emb).
std::vector<std::string> collect_speaker_names(const Corpus& corpus);

}  // namespace dmrc
