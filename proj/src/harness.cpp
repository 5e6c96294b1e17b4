#include "dmrc/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dmrc {

using ag::Mat;

void TrainConfig::validate() const {
  if (batch_size <= 0 || learning_rate <= 0 || max_seq_len <= 0 || epochs <= 0)
    throw DataError("train config: positive numerics required");
  if (warmup_fraction < 0 || warmup_fraction >= 1) throw DataError("train config: bad warmup");
  if (split_stride < 0) throw DataError("train config: bad stride");
  ablation_from_variant(variant);
}

Ablation ablation_from_variant(const std::string& variant) {
  Ablation a;
  if (variant == "full") return a;
  if (variant == "no_kidb") {
    a.no_kidb = true;
    return a;
  }
  if (variant == "no_sidb") {
    a.no_sidb = true;
    return a;
  }
  if (variant == "speaker_emb") {
    a.speaker_emb = true;
    return a;
  }
  if (variant == "no_detach") {
    a.no_detach = true;
    return a;
  }
  throw DataError("unknown variant: " + variant);
}

void apply_preset(const std::string& name, ModelConfig& mc, TrainConfig& tc) {
  if (name == "desk") {
    mc = ModelConfig{};
    tc.batch_size = 8;
    tc.learning_rate = 3e-4;
    tc.max_seq_len = mc.max_len;
  } else if (name == "molweni-paper") {
    // Full-scale settings; requires pretrained weights to be meaningful.
    mc.max_len = 384;
    mc.answerability_enabled = true;
    tc.batch_size = 8;
    tc.learning_rate = 1.2e-5;
    tc.max_seq_len = 384;
  } else if (name == "friendsqa-paper") {
    mc.max_len = 512;
    mc.answerability_enabled = false;
    tc.batch_size = 4;
    tc.learning_rate = 4e-6;
    tc.max_seq_len = 512;
  } else {
    throw DataError("unknown preset: " + name);
  }
}

// ---- answer scoring --------------------------------------------------------

std::string normalize_answer(const std::string& s) {
  std::string lowered;
  for (char c : s) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || std::isspace(u))
      lowered.push_back(static_cast<char>(std::tolower(u)));
    // punctuation dropped entirely, SQuAD-style
  }
  std::istringstream iss(lowered);
  std::string tok, out;
  while (iss >> tok) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out += " ";
    out += tok;
  }
  return out;
}

double exact_match(const std::string& prediction, const std::string& gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

namespace {

std::vector<std::string> norm_tokens(const std::string& s) {
  std::istringstream iss(normalize_answer(s));
  std::vector<std::string> out;
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

}  // namespace

double token_f1(const std::string& prediction, const std::string& gold) {
  const auto p = norm_tokens(prediction);
  const auto g = norm_tokens(gold);
  if (p.empty() || g.empty()) return (p.empty() && g.empty()) ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int common = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::pair<double, double> score_prediction(const std::string& prediction,
                                           const std::vector<std::string>& golds) {
  if (golds.empty()) {
    const double hit = normalize_answer(prediction).empty() ? 1.0 : 0.0;
    return {hit, hit};
  }
  double em = 0.0, f1 = 0.0;
  for (const auto& g : golds) {
    em = std::max(em, exact_match(prediction, g));
    f1 = std::max(f1, token_f1(prediction, g));
  }
  return {em, f1};
}

// ---- long-context splitting ------------------------------------------------

namespace {

int utterance_cost(const Utterance& u) {
  return static_cast<int>(tokenize(u.speaker).size()) + 1 /*colon*/ +
         static_cast<int>(u.words.size()) + 1 /*SEP*/;
}

Piece make_piece(const Dialogue& dialogue, const Question& question, const Vocabulary& vocab,
                 int s, int e, int piece_idx, const std::vector<int>& cum, int max_len,
                 int word_budget, std::vector<std::string>* warnings) {
  Piece piece;
  piece.utt_offset = s;
  piece.token_offset = cum[static_cast<size_t>(s)];
  piece.dialogue.id = dialogue.id + "#p" + std::to_string(piece_idx);
  std::vector<int> kept_words;  // per local utterance, after any truncation
  for (int k = s; k < e; ++k) {
    Utterance u = dialogue.utterances[static_cast<size_t>(k)];
    if (e - s == 1 && word_budget > 0 && static_cast<int>(u.words.size()) > word_budget) {
      if (warnings)
        warnings->push_back("utterance " + std::to_string(k) + " of " + dialogue.id +
                            " exceeds max_len alone; tail truncated");
      u.words.resize(static_cast<size_t>(word_budget));
      u.word_offsets.resize(static_cast<size_t>(word_budget));
      u.text = u.text.substr(0, static_cast<size_t>(u.word_offsets.back().second));
    }
    kept_words.push_back(static_cast<int>(u.words.size()));
    piece.dialogue.utterances.push_back(std::move(u));
  }
  piece.question = question;
  piece.question.id = question.id;
  piece.question.gold_answers.clear();
  std::vector<int> local_cum{0};
  for (int w : kept_words) local_cum.push_back(local_cum.back() + w);
  for (const auto& span : question.gold_answers) {
    if (span.utterance_index < s || span.utterance_index >= e) continue;
    const int lu = span.utterance_index - s;
    const int w0 = span.start_token - cum[static_cast<size_t>(span.utterance_index)];
    const int w1 = span.end_token - cum[static_cast<size_t>(span.utterance_index)];
    if (w1 >= kept_words[static_cast<size_t>(lu)]) continue;  // lost to truncation
    AnswerSpan local = span;
    local.utterance_index = lu;
    local.start_token = local_cum[static_cast<size_t>(lu)] + w0;
    local.end_token = local_cum[static_cast<size_t>(lu)] + w1;
    piece.question.gold_answers.push_back(local);
  }
  piece.question.answerable = !piece.question.gold_answers.empty();
  piece.packed = pack(piece.dialogue, piece.question, vocab, max_len);
  return piece;
}

}  // namespace

std::vector<Piece> split_long_context(const Dialogue& dialogue, const Question& question,
                                      const Vocabulary& vocab, int max_len, int stride,
                                      std::vector<std::string>* warnings) {
  const int n_utt = dialogue.num_utterances();
  const int base = 2 + static_cast<int>(question.tokens.size());  // CLS ... SEP
  std::vector<int> cum{0};
  for (const auto& u : dialogue.utterances)
    cum.push_back(cum.back() + static_cast<int>(u.words.size()));

  std::vector<Piece> pieces;
  int s = 0;
  int piece_idx = 0;
  while (s < n_utt) {
    int budget = max_len - base;
    int e = s;
    while (e < n_utt && utterance_cost(dialogue.utterances[static_cast<size_t>(e)]) <= budget) {
      budget -= utterance_cost(dialogue.utterances[static_cast<size_t>(e)]);
      ++e;
    }
    int word_budget = 0;
    if (e == s) {
      // A single utterance that cannot fit: truncate its tail.
      const Utterance& u = dialogue.utterances[static_cast<size_t>(s)];
      word_budget = max_len - base - static_cast<int>(tokenize(u.speaker).size()) - 2;
      if (word_budget < 1)
        throw DataError("split_long_context: max_len too small for any utterance of " +
                        dialogue.id);
      e = s + 1;
    }
    pieces.push_back(
        make_piece(dialogue, question, vocab, s, e, piece_idx++, cum, max_len, word_budget,
                   warnings));
    if (e >= n_utt) break;
    s = std::max(s + 1, e - stride);
  }
  return pieces;
}

MergedPrediction merge_predictions(const std::vector<Piece>& pieces,
                                   const std::vector<SpanPrediction>& preds) {
  if (pieces.empty() || pieces.size() != preds.size())
    throw DataError("merge_predictions: need one prediction per piece");
  size_t best = 0;
  for (size_t i = 1; i < preds.size(); ++i)
    if (preds[i].best.score > preds[best].best.score) best = i;  // ties keep the earlier piece
  MergedPrediction out;
  out.piece_index = static_cast<int>(best);
  out.start = preds[best].best.start + pieces[best].token_offset;
  out.end = preds[best].best.end + pieces[best].token_offset;
  out.score = preds[best].best.score;
  out.p_a = preds[best].p_a;
  out.answer_text =
      span_text(pieces[best].dialogue, pieces[best].packed, preds[best].best.start,
                preds[best].best.end);
  return out;
}

// ---- optimizer -------------------------------------------------------------

double lr_schedule(double peak, long step, long total_steps, double warmup_fraction) {
  const long warmup = std::max<long>(1, static_cast<long>(total_steps * warmup_fraction));
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total_steps) return 0.0;
  return peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

void adam_step(Model& model, AdamState& state, double lr, double grad_scale, double beta1,
               double beta2, double eps) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, v] : model.params) {
    auto [it, inserted] = state.moments.try_emplace(
        name, std::make_pair(Mat::Zero(v->val.rows(), v->val.cols()),
                             Mat::Zero(v->val.rows(), v->val.cols())));
    Mat g = v->grad * grad_scale;
    Mat& m = it->second.first;
    Mat& vv = it->second.second;
    m = beta1 * m + (1.0 - beta1) * g;
    vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
    v->val.array() -=
        lr * (m.array() / bc1) / ((vv.array() / bc2).sqrt() + eps);
  }
}

// ---- training --------------------------------------------------------------

std::vector<std::string> collect_speaker_names(const Corpus& corpus) {
  std::set<std::string> s;
  for (const auto& d : corpus.dialogues)
    for (const auto& u : d.utterances) s.insert(u.speaker);
  return {s.begin(), s.end()};
}

TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (corpus.items.empty()) throw DataError("train: empty corpus");
  std::vector<Piece> examples;
  std::vector<std::string> warnings;
  for (const auto& item : corpus.items) {
    auto pieces = split_long_context(corpus.dialogues[static_cast<size_t>(item.dialogue_index)],
                                     item.question, model.vocab,
                                     std::min(cfg.max_seq_len, model.config.max_len),
                                     cfg.split_stride, &warnings);
    for (auto& p : pieces) examples.push_back(std::move(p));
  }
  if (log)
    for (const auto& w : warnings) *log << nlohmann::json{{"warning", w}}.dump() << "\n";

  std::mt19937_64 rng(cfg.seed);
  auto rint = [&rng](int k) { return static_cast<int>(rng() % static_cast<uint64_t>(k)); };

  const long per_epoch =
      (static_cast<long>(examples.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = per_epoch * cfg.epochs;
  AdamState adam;
  TrainResult result;
  std::vector<int> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rint(i + 1))]);
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      const size_t bend = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      model.zero_grads();
      StepLog sl;
      for (size_t b = at; b < bend; ++b) {
        const Piece& ex = examples[static_cast<size_t>(order[b])];
        const int n_utt = ex.dialogue.num_utterances();
        const int m = n_utt >= 2 ? rint(n_utt) : -1;
        std::optional<AnswerSpan> span;
        if (ex.question.answerable) span = ex.question.gold_answers.front();
        ExampleForward fwd =
            forward_example(model, ex.dialogue, ex.packed, span, ex.question.answerable, m);
        if (!std::isfinite(fwd.total->val(0, 0)))
          throw DataError("training diverged (non-finite loss) at step " + std::to_string(step) +
                          " on " + ex.question.id);
        ag::backward(fwd.total);
        sl.total += fwd.total->val(0, 0);
        sl.l_u += fwd.l_u->val(0, 0);
        sl.l_s += fwd.l_s->val(0, 0);
        sl.l_se += fwd.l_se->val(0, 0);
        sl.l_a += fwd.l_a->val(0, 0);
      }
      const double inv = 1.0 / static_cast<double>(bend - at);
      sl.total *= inv;
      sl.l_u *= inv;
      sl.l_s *= inv;
      sl.l_se *= inv;
      sl.l_a *= inv;
      ++step;
      sl.step = step;
      adam_step(model, adam, lr_schedule(cfg.learning_rate, step, total_steps,
                                         cfg.warmup_fraction),
                inv);
      result.trajectory.push_back(sl);
      if (log)
        *log << nlohmann::json{{"step", sl.step}, {"epoch", epoch},  {"loss", sl.total},
                               {"l_u", sl.l_u},  {"l_s", sl.l_s},    {"l_se", sl.l_se},
                               {"l_a", sl.l_a}}
                    .dump()
             << "\n";
    }
  }
  quantize_params(model);
  return result;
}

// ---- evaluation ------------------------------------------------------------

namespace {

std::string question_type(const Question& q) {
  static const std::set<std::string> kTypes = {"who", "when", "what", "where", "why", "how"};
  if (!q.tokens.empty() && kTypes.count(q.tokens.front())) return q.tokens.front();
  return "other";
}

std::string utterance_bucket(int n) {
  if (n <= 4) return "<=4";
  if (n <= 8) return "5-8";
  if (n <= 12) return "9-12";
  return ">12";
}

std::string speaker_bucket(int n) { return n <= 5 ? std::to_string(n) : "6+"; }

bool has_sidb_head(const Model& model) {
  return !model.ablation.no_sidb && !model.ablation.speaker_emb;
}

}  // namespace

EvalReport evaluate(const Model& model, const Corpus& corpus, const TrainConfig& cfg,
                    uint64_t aux_seed) {
  EvalReport report;
  double em_sum = 0, f1_sum = 0;
  long spk_correct = 0, key_correct = 0;
  const int max_len = std::min(cfg.max_seq_len, model.config.max_len);
  for (size_t qi = 0; qi < corpus.items.size(); ++qi) {
    const auto& item = corpus.items[qi];
    const Dialogue& dialogue = corpus.dialogues[static_cast<size_t>(item.dialogue_index)];
    const auto pieces =
        split_long_context(dialogue, item.question, model.vocab, max_len, cfg.split_stride);
    std::vector<SpanPrediction> preds;
    for (const auto& p : pieces) preds.push_back(predict(model, p.dialogue, p.packed));
    const MergedPrediction merged = merge_predictions(pieces, preds);
    std::string answer = merged.answer_text;
    if (model.config.answerability_enabled && merged.p_a >= 0 && merged.p_a < 0.5) answer.clear();
    const auto [em, f1] = score_prediction(
        answer, item.question.answerable ? item.question.gold_texts : std::vector<std::string>{});
    em_sum += em;
    f1_sum += f1;
    ++report.count;
    for (auto* bucket :
         {&report.by_type[question_type(item.question)],
          &report.by_speaker_count[speaker_bucket(dialogue.num_distinct_speakers())],
          &report.by_utterance_count[utterance_bucket(dialogue.num_utterances())]}) {
      ++bucket->count;
      bucket->em_sum += em;
      bucket->f1_sum += f1;
    }

    // Auxiliary heads, on the gold-bearing (or first) piece.
    if (!model.ablation.no_kidb && item.question.answerable) {
      for (size_t p = 0; p < pieces.size(); ++p) {
        if (!pieces[p].question.answerable) continue;
        if (preds[p].p_u_pred.size() > 0) {
          Eigen::Index argmax;
          preds[p].p_u_pred.maxCoeff(&argmax);
          ++report.key_utterance_count;
          if (static_cast<int>(argmax) ==
              pieces[p].question.gold_answers.front().utterance_index)
            ++key_correct;
        }
        break;
      }
    }
    if (has_sidb_head(model)) {
      const Piece& p0 = pieces.front();
      if (p0.dialogue.num_utterances() >= 2) {
        std::mt19937_64 arng(aux_seed + qi);
        const int m = choose_masked_utterance(p0.dialogue, arng);
        const ExampleForward fwd = forward_example(
            model, p0.dialogue, p0.packed,
            p0.question.answerable ? std::optional<AnswerSpan>(p0.question.gold_answers.front())
                                   : std::nullopt,
            p0.question.answerable, m);
        for (Eigen::Index i = 0; i < fwd.p_s_pred.size(); ++i) {
          const int pred = fwd.p_s_pred(i) >= 0.5 ? 1 : 0;
          ++report.speaker_pairs;
          if (pred == fwd.speaker_target[static_cast<size_t>(i)]) ++spk_correct;
        }
      }
    }
  }
  if (report.count) {
    report.em = 100.0 * em_sum / report.count;
    report.f1 = 100.0 * f1_sum / report.count;
  }
  if (report.key_utterance_count)
    report.key_utterance_accuracy =
        static_cast<double>(key_correct) / static_cast<double>(report.key_utterance_count);
  if (report.speaker_pairs)
    report.speaker_accuracy =
        static_cast<double>(spk_correct) / static_cast<double>(report.speaker_pairs);
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["count"] = count;
  j["em"] = em;
  j["f1"] = f1;
  auto buckets = [](const std::map<std::string, BucketStats>& m) {
    nlohmann::json out;
    for (const auto& [k, b] : m)
      out[k] = {{"count", b.count}, {"em", b.em()}, {"f1", b.f1()}};
    return out;
  };
  j["by_type"] = buckets(by_type);
  j["by_speaker_count"] = buckets(by_speaker_count);
  j["by_utterance_count"] = buckets(by_utterance_count);
  j["speaker_accuracy"] = speaker_accuracy;
  j["speaker_pairs"] = speaker_pairs;
  j["key_utterance_accuracy"] = key_utterance_accuracy;
  j["key_utterance_count"] = key_utterance_count;
  return j.dump(1);
}

std::string predict_corpus_json(const Model& model, const Corpus& corpus,
                                const TrainConfig& cfg) {
  nlohmann::json out;
  const int max_len = std::min(cfg.max_seq_len, model.config.max_len);
  for (const auto& item : corpus.items) {
    const Dialogue& dialogue = corpus.dialogues[static_cast<size_t>(item.dialogue_index)];
    const auto pieces =
        split_long_context(dialogue, item.question, model.vocab, max_len, cfg.split_stride);
    std::vector<SpanPrediction> preds;
    for (const auto& p : pieces) preds.push_back(predict(model, p.dialogue, p.packed));
    const MergedPrediction merged = merge_predictions(pieces, preds);
    std::string answer = merged.answer_text;
    if (model.config.answerability_enabled && merged.p_a >= 0 && merged.p_a < 0.5) answer.clear();
    out[item.question.id] = {{"answer_text", answer},
                             {"a_s", merged.start},
                             {"a_e", merged.end},
                             {"score", merged.score},
                             {"p_a", merged.p_a}};
  }
  return out.dump(1);
}

EvalReport ablate(const std::string& variant, const Corpus& train_corpus,
                  const Corpus& test_corpus, const ModelConfig& mc, const TrainConfig& tc,
                  std::ostream* log, Model* out_model) {
  TrainConfig cfg = tc;
  cfg.variant = variant;
  const Ablation ab = ablation_from_variant(variant);
  const Vocabulary vocab = build_vocabulary(train_corpus, cfg.max_vocab);
  std::mt19937_64 rng(cfg.seed);
  Model model = build_model(mc, ab, vocab, collect_speaker_names(train_corpus), rng);
  train(model, train_corpus, cfg, log);
  EvalReport report = evaluate(model, test_corpus, cfg);
  if (out_model) *out_model = std::move(model);
  return report;
}

}  // namespace dmrc
