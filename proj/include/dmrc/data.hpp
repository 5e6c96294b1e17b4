#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dmrc {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Lowercase + whitespace split, punctuation broken out into single-char tokens.
std::vector<std::string> tokenize(const std::string& text);
/// Same tokens plus [start, end) byte offsets into the original string.
std::vector<std::pair<std::string, std::pair<int, int>>> tokenize_with_offsets(
    const std::string& text);

std::string canonicalize_speaker(const std::string& name);

struct Utterance {
  std::string speaker;  // canonicalized
  std::string text;     // original surface form
  std::vector<std::string> words;
  std::vector<std::pair<int, int>> word_offsets;  // [start, end) into text
};

/// Tokenizes text and canonicalizes the speaker name.
Utterance make_utterance(const std::string& speaker, const std::string& text);

struct Dialogue {
  std::string id;
  std::vector<Utterance> utterances;

  int num_utterances() const { return static_cast<int>(utterances.size()); }
  int num_distinct_speakers() const;
};

/// Inclusive token span in the packed context-token coordinate system.
struct AnswerSpan {
  int utterance_index = 0;
  int start_token = 0;
  int end_token = 0;
  std::string text;
};

struct Question {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<AnswerSpan> gold_answers;
  std::vector<std::string> gold_texts;  // surface strings, for EM/F1
  bool answerable = false;
};

struct Vocabulary {
  std::vector<std::string> id_to_word;
  std::unordered_map<std::string, int> word_to_id;
  int cls_id = 0, sep_id = 1, unk_id = 2, pad_id = 3, colon_id = 4;

  int id(const std::string& w) const {
    auto it = word_to_id.find(w);
    return it == word_to_id.end() ? unk_id : it->second;
  }
  int size() const { return static_cast<int>(id_to_word.size()); }
};

struct QAPair {
  int dialogue_index = 0;
  Question question;
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  std::vector<QAPair> items;
};

Vocabulary build_vocabulary(const Corpus& corpus, size_t max_size);

struct PackedInput {
  std::vector<int> token_ids;
  std::vector<int> sep_positions;  // question SEP first, then one per utterance
  int cls_position = 0;
  std::vector<std::pair<int, int>> speaker_name_spans;  // inclusive, per utterance
  std::vector<int> context_token_positions;             // the n normal tokens
  std::vector<int> token_to_utterance;                  // length n, weakly increasing
  // Source of context token k: (utterance index, word index within it).
  std::vector<std::pair<int, int>> context_token_source;

  int length() const { return static_cast<int>(token_ids.size()); }
  int num_utterances() const { return static_cast<int>(sep_positions.size()) - 1; }
  int num_context_tokens() const { return static_cast<int>(context_token_positions.size()); }
};

/// [CLS] question [SEP] speaker : words [SEP] ... per utterance.
/// Throws DataError if the packed length exceeds max_len.
PackedInput pack(const Dialogue& dialogue, const Question& question, const Vocabulary& vocab,
                 int max_len);

/// Index of the utterance containing the answer; nullopt when unanswerable.
std::optional<int> key_utterance_target(const std::optional<AnswerSpan>& span);

/// For each utterance i != m (original order, m removed): 1 iff speakers match.
std::vector<int> speaker_targets(const Dialogue& dialogue, int m);

/// Uniform over utterance indices. Throws DataError when N < 2.
int choose_masked_utterance(const Dialogue& dialogue, std::mt19937_64& rng);

/// Answer surface string for a context-token span [start, end] (inclusive).
std::string span_text(const Dialogue& dialogue, const PackedInput& packed, int start, int end);

/// SQuAD-v2-like JSON with context as a list of {speaker, text} objects.
/// In non-strict mode malformed records are skipped and reported via warnings.
Corpus load_squad_style(const std::string& path, bool strict,
                        std::vector<std::string>* warnings = nullptr);

void write_corpus_json(const Corpus& corpus, const std::string& path);

struct SyntheticConfig {
  int num_dialogues = 500;
  int questions_per_dialogue = 4;
  int num_speakers = 5;          // drawn from a pool of at most 9 names
  int min_utterances = 4;
  int max_utterances = 8;
  int num_topics = 40;
  double unanswerable_fraction = 0.1;
  double introduce_prob = 0.4;   // chance an utterance states its speaker's name
};

Corpus generate_synthetic(const SyntheticConfig& config, std::mt19937_64& rng);

}  // namespace dmrc
