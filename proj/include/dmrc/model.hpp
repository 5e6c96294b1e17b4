#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmrc/autograd.hpp"
#include "dmrc/data.hpp"

namespace dmrc {

struct ModelConfig {
  int d = 64;
  int h = 4;
  int total_layers = 4;       // L_all
  int decoupling_layers = 2;  // L, per decoupling block
  int ff_width = 256;
  int max_len = 128;
  int max_answer_len = 30;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  bool answerability_enabled = true;

  int head_dim() const { return d / h; }
  int encoder_layers() const { return total_layers - decoupling_layers; }
  void validate() const;
};

struct Ablation {
  bool no_kidb = false;
  bool no_sidb = false;
  bool speaker_emb = false;
  bool no_detach = false;
};

constexpr double kMaskNegInf = -1e30;

/// Additive attention mask blocking the speaker-name columns of utterance m.
/// Returns the J x J mask plus the inclusive packed span (m_s, m_e).
std::pair<ag::Mat, std::pair<int, int>> build_speaker_mask(const PackedInput& packed, int m);

struct Model {
  ModelConfig config;
  Ablation ablation;
  Vocabulary vocab;
  std::vector<std::string> speaker_names;  // lookup order for the speaker_emb variant
  std::map<std::string, ag::Var> params;

  ag::Var p(const std::string& name) const;
  void zero_grads();
  long num_parameters() const;
};

Model build_model(const ModelConfig& config, const Ablation& ablation, const Vocabulary& vocab,
                  const std::vector<std::string>& speaker_names, std::mt19937_64& rng);

/// Multi-head self-attention with optional additive mask, wrapped in
/// residual + layer norm. attn_out, when given, receives per-head weights.
ag::Var multihead(const Model& model, const std::string& prefix, const ag::Var& state,
                  const ag::Mat* mask, std::vector<ag::Mat>* attn_out = nullptr);

/// Full transformer block: masked multi-head then feed-forward, each with
/// residual + layer norm.
ag::Var transformer_block(const Model& model, const std::string& prefix, const ag::Var& state,
                          const ag::Mat* mask, std::vector<ag::Mat>* attn_out = nullptr);

/// Embeds the packed sequence and applies the L_all - L encoder layers.
ag::Var encode(const Model& model, const PackedInput& packed);

struct NodeBundle {
  ag::Var utterance_nodes;  // N x d
  ag::Var question_node;    // 1 x d
  ag::Var cls_node;         // 1 x d, pinned so the fusion layer has a CLS row
  ag::Var token_nodes;      // n x d
};

NodeBundle gather_nodes(const ag::Var& encoded, const PackedInput& packed);

/// Heuristic matching: per row of X against the single row y,
/// G = [X; Y; X-Y; X.Y] projected through a (4d x 1). N x 1 output.
/// The optional scalar bias lets the sigmoid head express a base rate
/// (a softmax is shift-invariant, so it takes none).
ag::Var match(const ag::Var& X, const ag::Var& y, const ag::Var& a, bool use_softmax,
              const ag::Var& bias = nullptr);

struct KeyUtteranceOutput {
  ag::Var p_u_pred;    // N x 1
  ag::Var p_u_expand;  // n x 1
  ag::Var tokens_k;    // n x d
  ag::Var cls_k;       // 1 x d
};

KeyUtteranceOutput kidb_forward(const Model& model, const NodeBundle& bundle,
                                const PackedInput& packed);

ag::Var key_utterance_loss(const ag::Var& p_u_pred, const std::optional<int>& target);

struct SpeakerPredictionOutput {
  ag::Var p_s_pred;  // (N-1) x 1, empty at inference or N = 1
  ag::Var tokens_s;  // n x d
  ag::Var cls_s;     // 1 x d
};

/// Training-time SIDB: detaches the encoder output (unless the no_detach
/// variant is active), applies the speaker-name column mask for utterance m.
SpeakerPredictionOutput sidb_forward(const Model& model, const ag::Var& encoded,
                                     const PackedInput& packed, int m);

/// Evaluation-time SIDB: zero mask, all speakers visible, no prediction head.
SpeakerPredictionOutput inference_mode_sidb(const Model& model, const ag::Var& encoded,
                                            const PackedInput& packed);

ag::Var speaker_loss(const ag::Var& p_s_pred, const std::vector<int>& targets);

ag::Var fuse(const Model& model, const ag::Var& tokens_k, const ag::Var& tokens_s);

/// Eq-literal start/end distributions over the n context tokens: softmax of a
/// linear readout, elementwise-gated by the expanded key-utterance
/// distribution, not renormalized.
std::pair<ag::Var, ag::Var> span_distributions(const Model& model, const ag::Var& fused,
                                               const ag::Var& p_u_expand);

ag::Var span_loss(const ag::Var& p_start, const ag::Var& p_end, int a_s, int a_e);

ag::Var answerability_prob(const Model& model, const ag::Var& fused_cls);
ag::Var answerability_loss(const ag::Var& p_a, bool answerable);

ag::Var total_loss(const ag::Var& l_u, const ag::Var& l_s, const ag::Var& l_se,
                   const ag::Var& l_a);

struct BestSpan {
  int start = 0;
  int end = 0;
  double score = 0.0;
};

/// Argmax of P_start[s] * P_end[e] over s <= e <= s + max_answer_len - 1,
/// ties to the smallest s then smallest e.
BestSpan extract_best_span(const Eigen::VectorXd& p_start, const Eigen::VectorXd& p_end,
                           int max_answer_len);

// ---- end-to-end graphs -----------------------------------------------------

struct ExampleForward {
  ag::Var total;                  // scalar
  ag::Var l_u, l_s, l_se, l_a;    // scalars (0-valued constants when absent)
  Eigen::VectorXd p_u_pred;       // empty for no_kidb
  Eigen::VectorXd p_s_pred;       // empty when the speaker task was inapplicable
  std::vector<int> speaker_target;
  double p_a = -1.0;              // -1 when the answerability head is off
};

/// Builds the full training graph for one packed example. m < 0 means the
/// speaker task is skipped (N = 1 dialogues).
ExampleForward forward_example(const Model& model, const Dialogue& dialogue,
                               const PackedInput& packed, const std::optional<AnswerSpan>& span,
                               bool answerable, int m);

struct SpanPrediction {
  Eigen::VectorXd p_start, p_end;  // length n
  double p_a = -1.0;
  BestSpan best;
  Eigen::VectorXd p_u_pred;        // empty for no_kidb
};

SpanPrediction predict(const Model& model, const Dialogue& dialogue, const PackedInput& packed);

// ---- checkpointing ---------------------------------------------------------

/// Single-file archive: JSON header (config, variant, vocab, parameter table)
/// followed by raw little-endian float32 buffers.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

/// Rounds every parameter to float32 precision in place, so an in-memory
/// model and its saved checkpoint evaluate identically.
void quantize_params(Model& model);

}  // namespace dmrc
