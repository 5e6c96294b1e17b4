#include "dmrc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dmrc {

using ag::Mat;
using ag::Var;

void ModelConfig::validate() const {
  if (d <= 0 || h <= 0 || d % h != 0) throw DataError("config: d must be positive and divisible by h");
  if (decoupling_layers < 0 || decoupling_layers > total_layers)
    throw DataError("config: need 0 <= L <= L_all");
  if (ff_width <= 0 || max_len <= 0 || max_answer_len <= 0) throw DataError("config: bad sizes");
}

namespace {

double rand_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

// Truncated normal (|z| <= 2 std), Box-Muller so the stream is
// implementation-independent.
double trunc_normal(std::mt19937_64& rng, double std_dev) {
  for (;;) {
    const double u1 = std::max(rand_unit(rng), 1e-12);
    const double u2 = rand_unit(rng);
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    if (std::abs(z) <= 2.0) return z * std_dev;
  }
}

// Glorot scaling: at this width a fixed small std (the 0.02 used by the
// BERT family at d >= 768) leaves attention logits nearly uniform and slows
// early training badly; scaling by fan-in + fan-out keeps activation and
// gradient variance near 1 across layer shapes.
Mat init_weight(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(r + c));
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = trunc_normal(rng, std_dev);
  return m;
}

void add_layer_params(std::map<std::string, Var>& ps, const std::string& prefix,
                      const ModelConfig& cfg, std::mt19937_64& rng) {
  const int d = cfg.d;
  for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
    ps[prefix + w] = ag::make_param(init_weight(rng, d, d));
  for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
    ps[prefix + b] = ag::make_param(Mat::Zero(1, d));
  ps[prefix + "ln1.g"] = ag::make_param(Mat::Ones(1, d));
  ps[prefix + "ln1.b"] = ag::make_param(Mat::Zero(1, d));
  ps[prefix + "ff.w1"] = ag::make_param(init_weight(rng, d, cfg.ff_width));
  ps[prefix + "ff.b1"] = ag::make_param(Mat::Zero(1, cfg.ff_width));
  ps[prefix + "ff.w2"] = ag::make_param(init_weight(rng, cfg.ff_width, d));
  ps[prefix + "ff.b2"] = ag::make_param(Mat::Zero(1, d));
  ps[prefix + "ln2.g"] = ag::make_param(Mat::Ones(1, d));
  ps[prefix + "ln2.b"] = ag::make_param(Mat::Zero(1, d));
}

}  // namespace

Var Model::p(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw DataError("missing parameter " + name);
  return it->second;
}

void Model::zero_grads() {
  for (auto& [name, v] : params) v->zero_grad();
}

long Model::num_parameters() const {
  long n = 0;
  for (const auto& [name, v] : params) n += static_cast<long>(v->val.size());
  return n;
}

Model build_model(const ModelConfig& config, const Ablation& ablation, const Vocabulary& vocab,
                  const std::vector<std::string>& speaker_names, std::mt19937_64& rng) {
  config.validate();
  if (ablation.no_sidb + ablation.speaker_emb + ablation.no_detach > 1)
    throw DataError("at most one SIDB variant flag may be active");
  Model m;
  m.config = config;
  m.ablation = ablation;
  m.vocab = vocab;
  m.speaker_names = speaker_names;
  const int d = config.d;
  auto& ps = m.params;
  ps["emb.tok"] = ag::make_param(init_weight(rng, vocab.size(), d));
  ps["emb.pos"] = ag::make_param(init_weight(rng, config.max_len, d));
  for (int i = 0; i < config.encoder_layers(); ++i)
    add_layer_params(ps, "enc." + std::to_string(i) + ".", config, rng);
  if (!ablation.no_kidb) {
    for (int i = 0; i < config.decoupling_layers; ++i)
      add_layer_params(ps, "kidb." + std::to_string(i) + ".", config, rng);
    ps["kidb.match_a"] = ag::make_param(init_weight(rng, 4 * d, 1));
  }
  if (!ablation.no_sidb && !ablation.speaker_emb) {
    for (int i = 0; i < config.decoupling_layers; ++i)
      add_layer_params(ps, "sidb." + std::to_string(i) + ".", config, rng);
    ps["sidb.match_a"] = ag::make_param(init_weight(rng, 4 * d, 1));
    ps["sidb.match_b"] = ag::make_param(Mat::Zero(1, 1));
  }
  if (ablation.speaker_emb) {
    // one row per known speaker plus a reserved row for CLS/unknown
    ps["spk_emb.table"] =
        ag::make_param(init_weight(rng, static_cast<Eigen::Index>(speaker_names.size()) + 1, d));
  }
  ps["fuse.wf"] = ag::make_param(init_weight(rng, 4 * d, d));
  ps["span.w_start"] = ag::make_param(init_weight(rng, d, 1));
  ps["span.w_end"] = ag::make_param(init_weight(rng, d, 1));
  if (config.answerability_enabled) {
    ps["ans.w"] = ag::make_param(init_weight(rng, d, 1));
    ps["ans.b"] = ag::make_param(Mat::Zero(1, 1));
  }
  return m;
}

std::pair<Mat, std::pair<int, int>> build_speaker_mask(const PackedInput& packed, int m) {
  if (m < 0 || m >= packed.num_utterances()) throw DataError("build_speaker_mask: bad m");
  const auto span = packed.speaker_name_spans[static_cast<size_t>(m)];
  const int j = packed.length();
  Mat mask = Mat::Zero(j, j);
  for (int col = span.first; col <= span.second; ++col) mask.col(col).setConstant(kMaskNegInf);
  return {mask, span};
}

Var multihead(const Model& model, const std::string& prefix, const Var& state, const Mat* mask,
              std::vector<Mat>* attn_out) {
  const ModelConfig& cfg = model.config;
  const Eigen::Index j = state->val.rows();
  if (state->val.cols() != cfg.d) throw DataError("multihead: state width mismatch");
  if (mask) {
    if (mask->rows() != j || mask->cols() != j) throw DataError("multihead: mask shape mismatch");
    for (Eigen::Index r = 0; r < j; ++r)
      if ((mask->row(r).array() <= kMaskNegInf / 2).all())
        throw DataError("multihead: fully masked attention row (construction bug)");
  }
  const Var q = ag::add_row_broadcast(ag::matmul(state, model.p(prefix + "attn.wq")),
                                      model.p(prefix + "attn.bq"));
  const Var k = ag::add_row_broadcast(ag::matmul(state, model.p(prefix + "attn.wk")),
                                      model.p(prefix + "attn.bk"));
  const Var v = ag::add_row_broadcast(ag::matmul(state, model.p(prefix + "attn.wv")),
                                      model.p(prefix + "attn.bv"));
  const int dk = cfg.head_dim();
  std::vector<Var> heads;
  for (int hd = 0; hd < cfg.h; ++hd) {
    const Var qh = ag::slice_cols(q, hd * dk, dk);
    const Var kh = ag::slice_cols(k, hd * dk, dk);
    const Var vh = ag::slice_cols(v, hd * dk, dk);
    Var scores = ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask) scores = ag::add(scores, ag::constant(*mask));
    const Var weights = ag::softmax_rows(scores);
    if (attn_out) attn_out->push_back(weights->val);
    heads.push_back(ag::matmul(weights, vh));
  }
  const Var attn = ag::add_row_broadcast(
      ag::matmul(ag::concat_cols(heads), model.p(prefix + "attn.wo")), model.p(prefix + "attn.bo"));
  return ag::layer_norm(ag::add(state, attn), model.p(prefix + "ln1.g"), model.p(prefix + "ln1.b"),
                        cfg.ln_eps);
}

Var transformer_block(const Model& model, const std::string& prefix, const Var& state,
                      const Mat* mask, std::vector<Mat>* attn_out) {
  const Var y = multihead(model, prefix, state, mask, attn_out);
  const Var ff = ag::add_row_broadcast(
      ag::matmul(ag::gelu(ag::add_row_broadcast(ag::matmul(y, model.p(prefix + "ff.w1")),
                                                model.p(prefix + "ff.b1"))),
                 model.p(prefix + "ff.w2")),
      model.p(prefix + "ff.b2"));
  return ag::layer_norm(ag::add(y, ff), model.p(prefix + "ln2.g"), model.p(prefix + "ln2.b"),
                        model.config.ln_eps);
}

Var encode(const Model& model, const PackedInput& packed) {
  const int j = packed.length();
  if (j > model.config.max_len) throw DataError("encode: input longer than max_len");
  std::vector<int> positions(static_cast<size_t>(j));
  for (int i = 0; i < j; ++i) {
    if (packed.token_ids[static_cast<size_t>(i)] < 0 ||
        packed.token_ids[static_cast<size_t>(i)] >= model.vocab.size())
      throw DataError("encode: token id out of vocabulary");
    positions[static_cast<size_t>(i)] = i;
  }
  Var x = ag::add(ag::gather_rows(model.p("emb.tok"), packed.token_ids),
                  ag::gather_rows(model.p("emb.pos"), positions));
  for (int i = 0; i < model.config.encoder_layers(); ++i)
    x = transformer_block(model, "enc." + std::to_string(i) + ".", x, nullptr);
  return x;
}

NodeBundle gather_nodes(const Var& encoded, const PackedInput& packed) {
  const int n = packed.num_context_tokens();
  if (packed.sep_positions.empty() || static_cast<int>(packed.token_to_utterance.size()) != n ||
      static_cast<int>(packed.speaker_name_spans.size()) != packed.num_utterances())
    throw DataError("gather_nodes: inconsistent packed metadata");
  for (int pos : packed.sep_positions)
    if (pos < 0 || pos >= encoded->val.rows()) throw DataError("gather_nodes: sep out of range");
  NodeBundle b;
  std::vector<int> utt_seps(packed.sep_positions.begin() + 1, packed.sep_positions.end());
  b.utterance_nodes = ag::gather_rows(encoded, utt_seps);
  b.question_node = ag::slice_rows(
      encoded, static_cast<Eigen::Index>(packed.sep_positions[0]), 1);
  b.cls_node = ag::slice_rows(encoded, packed.cls_position, 1);
  b.token_nodes = ag::gather_rows(encoded, packed.context_token_positions);
  return b;
}

Var match(const Var& X, const Var& y, const Var& a, bool use_softmax, const Var& bias) {
  const Eigen::Index n = X->val.rows();
  if (y->val.rows() != 1 || y->val.cols() != X->val.cols())
    throw DataError("match: y must be 1 x d");
  const Var Y = ag::broadcast_row(y, n);
  const Var g = ag::concat_cols({X, Y, ag::sub(X, Y), ag::cmul(X, Y)});
  Var logits = ag::matmul(g, a);  // n x 1
  if (bias) logits = ag::add_row_broadcast(logits, bias);
  if (use_softmax) return ag::transpose(ag::softmax_rows(ag::transpose(logits)));
  return ag::sigmoid_(logits);
}

KeyUtteranceOutput kidb_forward(const Model& model, const NodeBundle& bundle,
                                const PackedInput& packed) {
  const int n_utt = packed.num_utterances();
  const int n = packed.num_context_tokens();
  Var seq = ag::concat_rows(
      {bundle.utterance_nodes, bundle.question_node, bundle.cls_node, bundle.token_nodes});
  for (int i = 0; i < model.config.decoupling_layers; ++i)
    seq = transformer_block(model, "kidb." + std::to_string(i) + ".", seq, nullptr);
  KeyUtteranceOutput out;
  const Var h_u = ag::slice_rows(seq, 0, n_utt);
  const Var h_q = ag::slice_rows(seq, n_utt, 1);
  out.cls_k = ag::slice_rows(seq, n_utt + 1, 1);
  out.tokens_k = ag::slice_rows(seq, n_utt + 2, n);
  out.p_u_pred = match(h_u, h_q, model.p("kidb.match_a"), /*use_softmax=*/true);
  out.p_u_expand = ag::gather_rows(out.p_u_pred, packed.token_to_utterance);
  return out;
}

Var key_utterance_loss(const Var& p_u_pred, const std::optional<int>& target) {
  if (!target) return ag::constant(Mat::Zero(1, 1));
  if (*target < 0 || *target >= p_u_pred->val.rows())
    throw DataError("key_utterance_loss: target out of range");
  return ag::neg_log(ag::pick(p_u_pred, *target, 0), 1e-12);
}

namespace {

SpeakerPredictionOutput sidb_run(const Model& model, const Var& encoded, const PackedInput& packed,
                                 int m, bool masked) {
  const int n_utt = packed.num_utterances();
  const int n = packed.num_context_tokens();
  const Var e = model.ablation.no_detach ? encoded : ag::detach(encoded);
  std::vector<Var> parts;
  if (masked) {
    std::vector<int> other_seps;
    for (int k = 0; k < n_utt; ++k)
      if (k != m) other_seps.push_back(packed.sep_positions[static_cast<size_t>(k) + 1]);
    if (!other_seps.empty()) parts.push_back(ag::gather_rows(e, other_seps));
    parts.push_back(
        ag::slice_rows(e, packed.sep_positions[static_cast<size_t>(m) + 1], 1));  // masked node
  } else {
    std::vector<int> seps(packed.sep_positions.begin() + 1, packed.sep_positions.end());
    parts.push_back(ag::gather_rows(e, seps));
  }
  parts.push_back(ag::slice_rows(e, packed.cls_position, 1));
  parts.push_back(ag::gather_rows(e, packed.context_token_positions));
  int blocked = 0;
  if (masked) {
    // Masked speaker-name rows ride along as queries; as keys they are blocked.
    const auto span = packed.speaker_name_spans[static_cast<size_t>(m)];
    blocked = span.second - span.first + 1;
    parts.push_back(ag::slice_rows(e, span.first, blocked));
  }
  Var seq = ag::concat_rows(parts);
  const Eigen::Index len = seq->val.rows();
  Mat mask;
  if (masked) {
    mask = Mat::Zero(len, len);
    mask.rightCols(blocked).setConstant(kMaskNegInf);
  }
  for (int i = 0; i < model.config.decoupling_layers; ++i)
    seq = transformer_block(model, "sidb." + std::to_string(i) + ".", seq,
                            masked ? &mask : nullptr);
  SpeakerPredictionOutput out;
  out.cls_s = ag::slice_rows(seq, n_utt, 1);
  out.tokens_s = ag::slice_rows(seq, n_utt + 1, n);
  if (masked && n_utt >= 2) {
    const Var h_s = ag::slice_rows(seq, 0, n_utt - 1);
    const Var h_m = ag::slice_rows(seq, n_utt - 1, 1);
    out.p_s_pred = match(h_s, h_m, model.p("sidb.match_a"), /*use_softmax=*/false,
                         model.p("sidb.match_b"));
  }
  return out;
}

}  // namespace

SpeakerPredictionOutput sidb_forward(const Model& model, const Var& encoded,
                                     const PackedInput& packed, int m) {
  if (packed.num_utterances() < 2)
    return sidb_run(model, encoded, packed, -1, /*masked=*/false);
  return sidb_run(model, encoded, packed, m, /*masked=*/true);
}

SpeakerPredictionOutput inference_mode_sidb(const Model& model, const Var& encoded,
                                            const PackedInput& packed) {
  return sidb_run(model, encoded, packed, -1, /*masked=*/false);
}

Var speaker_loss(const Var& p_s_pred, const std::vector<int>& targets) {
  if (targets.empty()) return ag::constant(Mat::Zero(1, 1));
  std::vector<double> t(targets.begin(), targets.end());
  return ag::bce_loss(p_s_pred, t, 1e-7);
}

Var fuse(const Model& model, const Var& tokens_k, const Var& tokens_s) {
  if (tokens_k->val.rows() != tokens_s->val.rows() ||
      tokens_k->val.cols() != tokens_s->val.cols())
    throw DataError("fuse: shape mismatch");
  const Var cat = ag::concat_cols(
      {tokens_k, tokens_s, ag::sub(tokens_k, tokens_s), ag::cmul(tokens_k, tokens_s)});
  return ag::tanh_(ag::matmul(cat, model.p("fuse.wf")));
}

std::pair<Var, Var> span_distributions(const Model& model, const Var& fused,
                                       const Var& p_u_expand) {
  if (fused->val.rows() != p_u_expand->val.rows())
    throw DataError("span_distributions: length mismatch");
  auto one = [&](const char* w) {
    const Var logits = ag::transpose(ag::matmul(fused, model.p(w)));  // 1 x n
    return ag::cmul(ag::transpose(ag::softmax_rows(logits)), p_u_expand);
  };
  return {one("span.w_start"), one("span.w_end")};
}

Var span_loss(const Var& p_start, const Var& p_end, int a_s, int a_e) {
  const int n = static_cast<int>(p_start->val.rows());
  if (a_s < 0 || a_e < a_s || a_e >= n) throw DataError("span_loss: bad indices");
  return ag::add(ag::neg_log(ag::pick(p_start, a_s, 0), 1e-12),
                 ag::neg_log(ag::pick(p_end, a_e, 0), 1e-12));
}

Var answerability_prob(const Model& model, const Var& fused_cls) {
  if (!model.config.answerability_enabled)
    throw DataError("answerability head is disabled in this configuration");
  return ag::sigmoid_(
      ag::add(ag::matmul(fused_cls, model.p("ans.w")), model.p("ans.b")));
}

Var answerability_loss(const Var& p_a, bool answerable) {
  return ag::bce_loss(p_a, {answerable ? 1.0 : 0.0}, 1e-7);
}

Var total_loss(const Var& l_u, const Var& l_s, const Var& l_se, const Var& l_a) {
  return ag::add(ag::add(l_u, l_s), ag::add(l_se, l_a));
}

BestSpan extract_best_span(const Eigen::VectorXd& p_start, const Eigen::VectorXd& p_end,
                           int max_answer_len) {
  const int n = static_cast<int>(p_start.size());
  if (n == 0 || p_end.size() != n) throw DataError("extract_best_span: empty or mismatched");
  if (max_answer_len < 1) throw DataError("extract_best_span: max_answer_len must be >= 1");
  BestSpan best;
  best.score = -1.0;
  for (int s = 0; s < n; ++s)
    for (int e = s; e < std::min(n, s + max_answer_len); ++e) {
      const double sc = p_start(s) * p_end(e);
      if (sc > best.score) best = {s, e, sc};
    }
  return best;
}

namespace {

struct SidbTokens {
  Var tokens_s, cls_s;
  SpeakerPredictionOutput raw;
};

SidbTokens sidb_tokens(const Model& model, const Dialogue& dialogue, const Var& encoded,
                       const NodeBundle& bundle, const PackedInput& packed, int m) {
  SidbTokens out;
  if (model.ablation.no_sidb) {
    out.tokens_s = bundle.token_nodes;
    out.cls_s = bundle.cls_node;
    return out;
  }
  if (model.ablation.speaker_emb) {
    const Var table = model.p("spk_emb.table");
    const int unknown = static_cast<int>(model.speaker_names.size());
    std::vector<int> ids;
    for (int k : packed.token_to_utterance) {
      const std::string& name = dialogue.utterances[static_cast<size_t>(k)].speaker;
      auto it = std::find(model.speaker_names.begin(), model.speaker_names.end(), name);
      ids.push_back(it == model.speaker_names.end()
                        ? unknown
                        : static_cast<int>(it - model.speaker_names.begin()));
    }
    out.tokens_s = ag::gather_rows(table, ids);
    out.cls_s = ag::gather_rows(table, std::vector<int>{unknown});
    return out;
  }
  out.raw = m >= 0 ? sidb_forward(model, encoded, packed, m)
                   : inference_mode_sidb(model, encoded, packed);
  out.tokens_s = out.raw.tokens_s;
  out.cls_s = out.raw.cls_s;
  return out;
}

// Span distributions over [CLS; tokens] when the answerability head is on
// (the CLS slot absorbs unanswerable training targets), else over tokens.
struct SpanGraph {
  Var p_start, p_end;  // (n + offset) x 1
  int offset = 0;      // index shift of context token 0
};

SpanGraph span_graph(const Model& model, const Var& fused_all, const Var& gate_tokens) {
  SpanGraph g;
  if (model.config.answerability_enabled) {
    Mat one(1, 1);
    one(0, 0) = 1.0;
    const Var gate = ag::concat_rows({ag::constant(one), gate_tokens});
    auto [ps, pe] = span_distributions(model, fused_all, gate);
    g.p_start = ps;
    g.p_end = pe;
    g.offset = 1;
  } else {
    const Var tokens = ag::slice_rows(fused_all, 1, fused_all->val.rows() - 1);
    auto [ps, pe] = span_distributions(model, tokens, gate_tokens);
    g.p_start = ps;
    g.p_end = pe;
    g.offset = 0;
  }
  return g;
}

}  // namespace

ExampleForward forward_example(const Model& model, const Dialogue& dialogue,
                               const PackedInput& packed, const std::optional<AnswerSpan>& span,
                               bool answerable, int m) {
  const int n = packed.num_context_tokens();
  const Var encoded = encode(model, packed);
  const NodeBundle bundle = gather_nodes(encoded, packed);

  ExampleForward out;
  Var tokens_k, cls_k, gate;
  if (model.ablation.no_kidb) {
    tokens_k = bundle.token_nodes;
    cls_k = bundle.cls_node;
    gate = ag::constant(Mat::Ones(n, 1));
    out.l_u = ag::constant(Mat::Zero(1, 1));
  } else {
    const KeyUtteranceOutput kidb = kidb_forward(model, bundle, packed);
    tokens_k = kidb.tokens_k;
    cls_k = kidb.cls_k;
    gate = kidb.p_u_expand;
    out.p_u_pred = kidb.p_u_pred->val.col(0);
    out.l_u = key_utterance_loss(kidb.p_u_pred, key_utterance_target(span));
  }

  const SidbTokens sidb = sidb_tokens(model, dialogue, encoded, bundle, packed, m);
  if (sidb.raw.p_s_pred && m >= 0) {
    out.speaker_target = speaker_targets(dialogue, m);
    out.l_s = speaker_loss(sidb.raw.p_s_pred, out.speaker_target);
    out.p_s_pred = sidb.raw.p_s_pred->val.col(0);
  } else {
    out.l_s = ag::constant(Mat::Zero(1, 1));
  }

  const Var fused_all = fuse(model, ag::concat_rows({cls_k, tokens_k}),
                             ag::concat_rows({sidb.cls_s, sidb.tokens_s}));
  const SpanGraph sg = span_graph(model, fused_all, gate);

  if (answerable) {
    if (!span) throw DataError("forward_example: answerable without span");
    out.l_se = span_loss(sg.p_start, sg.p_end, span->start_token + sg.offset,
                         span->end_token + sg.offset);
  } else if (model.config.answerability_enabled) {
    out.l_se = span_loss(sg.p_start, sg.p_end, 0, 0);  // CLS slot
  } else {
    out.l_se = ag::constant(Mat::Zero(1, 1));
  }

  if (model.config.answerability_enabled) {
    const Var fused_cls = ag::slice_rows(fused_all, 0, 1);
    const Var p_a = answerability_prob(model, fused_cls);
    out.p_a = p_a->val(0, 0);
    out.l_a = answerability_loss(p_a, answerable);
  } else {
    out.l_a = ag::constant(Mat::Zero(1, 1));
  }
  out.total = total_loss(out.l_u, out.l_s, out.l_se, out.l_a);
  return out;
}

SpanPrediction predict(const Model& model, const Dialogue& dialogue, const PackedInput& packed) {
  const int n = packed.num_context_tokens();
  const Var encoded = encode(model, packed);
  const NodeBundle bundle = gather_nodes(encoded, packed);
  Var tokens_k, cls_k, gate;
  SpanPrediction out;
  if (model.ablation.no_kidb) {
    tokens_k = bundle.token_nodes;
    cls_k = bundle.cls_node;
    gate = ag::constant(Mat::Ones(n, 1));
  } else {
    const KeyUtteranceOutput kidb = kidb_forward(model, bundle, packed);
    tokens_k = kidb.tokens_k;
    cls_k = kidb.cls_k;
    gate = kidb.p_u_expand;
    out.p_u_pred = kidb.p_u_pred->val.col(0);
  }
  const SidbTokens sidb = sidb_tokens(model, dialogue, encoded, bundle, packed, -1);
  const Var fused_all = fuse(model, ag::concat_rows({cls_k, tokens_k}),
                             ag::concat_rows({sidb.cls_s, sidb.tokens_s}));
  const SpanGraph sg = span_graph(model, fused_all, gate);
  out.p_start = sg.p_start->val.col(0).tail(n);
  out.p_end = sg.p_end->val.col(0).tail(n);
  if (model.config.answerability_enabled)
    out.p_a = answerability_prob(model, ag::slice_rows(fused_all, 0, 1))->val(0, 0);
  out.best = extract_best_span(out.p_start, out.p_end, model.config.max_answer_len);
  return out;
}

// ---- checkpointing ---------------------------------------------------------

namespace {
constexpr char kMagic[] = "DMRC-CKPT-1\n";
}

void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = {{"d", model.config.d},
                      {"h", model.config.h},
                      {"total_layers", model.config.total_layers},
                      {"decoupling_layers", model.config.decoupling_layers},
                      {"ff_width", model.config.ff_width},
                      {"max_len", model.config.max_len},
                      {"max_answer_len", model.config.max_answer_len},
                      {"dropout", model.config.dropout},
                      {"ln_eps", model.config.ln_eps},
                      {"answerability_enabled", model.config.answerability_enabled}};
  header["ablation"] = {{"no_kidb", model.ablation.no_kidb},
                        {"no_sidb", model.ablation.no_sidb},
                        {"speaker_emb", model.ablation.speaker_emb},
                        {"no_detach", model.ablation.no_detach}};
  header["vocab"] = model.vocab.id_to_word;
  header["speaker_names"] = model.speaker_names;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, v] : model.params)
    plist.push_back({{"name", name}, {"rows", v->val.rows()}, {"cols", v->val.cols()}});
  header["params"] = plist;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic) - 1);
  const uint64_t hlen = hs.size();
  unsigned char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(lenbuf), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  std::vector<float> buf;
  for (const auto& [name, v] : model.params) {
    buf.resize(static_cast<size_t>(v->val.size()));
    size_t at = 0;
    for (Eigen::Index i = 0; i < v->val.rows(); ++i)
      for (Eigen::Index j = 0; j < v->val.cols(); ++j) buf[at++] = static_cast<float>(v->val(i, j));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw DataError("short write to checkpoint " + path);
}

void quantize_params(Model& model) {
  for (auto& [name, v] : model.params)
    v->val = v->val.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw DataError("not a checkpoint file: " + path);
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  ModelConfig cfg;
  const auto& cj = header.at("config");
  cfg.d = cj.at("d");
  cfg.h = cj.at("h");
  cfg.total_layers = cj.at("total_layers");
  cfg.decoupling_layers = cj.at("decoupling_layers");
  cfg.ff_width = cj.at("ff_width");
  cfg.max_len = cj.at("max_len");
  cfg.max_answer_len = cj.at("max_answer_len");
  cfg.dropout = cj.at("dropout");
  cfg.ln_eps = cj.at("ln_eps");
  cfg.answerability_enabled = cj.at("answerability_enabled");
  Ablation ab;
  const auto& aj = header.at("ablation");
  ab.no_kidb = aj.at("no_kidb");
  ab.no_sidb = aj.at("no_sidb");
  ab.speaker_emb = aj.at("speaker_emb");
  ab.no_detach = aj.at("no_detach");
  Vocabulary vocab;
  vocab.id_to_word = header.at("vocab").get<std::vector<std::string>>();
  for (size_t i = 0; i < vocab.id_to_word.size(); ++i)
    vocab.word_to_id[vocab.id_to_word[i]] = static_cast<int>(i);
  std::vector<std::string> speakers = header.at("speaker_names").get<std::vector<std::string>>();

  std::mt19937_64 rng(0);
  Model model = build_model(cfg, ab, vocab, speakers, rng);
  for (const auto& pj : header.at("params")) {
    const std::string name = pj.at("name");
    const Eigen::Index rows = pj.at("rows");
    const Eigen::Index cols = pj.at("cols");
    auto it = model.params.find(name);
    if (it == model.params.end())
      throw DataError("checkpoint parameter " + name + " not in model (variant mismatch?)");
    if (it->second->val.rows() != rows || it->second->val.cols() != cols)
      throw DataError("checkpoint parameter " + name + " has mismatched shape");
    std::vector<float> buf(static_cast<size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint data: " + path);
    size_t at = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        it->second->val(i, j) = static_cast<double>(buf[at++]);
  }
  return model;
}

}  // namespace dmrc
