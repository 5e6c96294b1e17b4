#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "dmrc/model.hpp"

using namespace dmrc;
using ag::Mat;
using ag::Var;

namespace {

struct Fixture {
  Corpus corpus;
  Vocabulary vocab;
  Dialogue dialogue;
  Question question;

  Fixture() {
    dialogue.id = "d";
    dialogue.utterances.push_back(make_utterance("joey", "hey"));
    dialogue.utterances.push_back(make_utterance("ross", "i left"));
    question.id = "q";
    question.tokens = {"who", "left"};
    corpus.dialogues.push_back(dialogue);
    corpus.items.push_back({0, question});
    vocab = build_vocabulary(corpus, 1000);
  }
};

Model tiny_model(const Fixture& f, const Ablation& ab = Ablation{}, bool answerability = true,
                 uint64_t seed = 31) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.h = 2;
  cfg.total_layers = 2;
  cfg.decoupling_layers = 1;
  cfg.ff_width = 16;
  cfg.max_len = 64;
  cfg.answerability_enabled = answerability;
  std::mt19937_64 rng(seed);
  return build_model(cfg, ab, f.vocab, {"joey", "ross"}, rng);
}

BestSpan brute_force_span(const Eigen::VectorXd& ps, const Eigen::VectorXd& pe, int max_len) {
  BestSpan best;
  best.score = -1.0;
  for (int s = 0; s < ps.size(); ++s)
    for (int e = s; e < ps.size(); ++e) {
      if (e - s + 1 > max_len) continue;
      const double sc = ps(s) * pe(e);
      if (sc > best.score) best = {s, e, sc};
    }
  return best;
}

}  // namespace

TEST_CASE("fuse reduces to tanh of the difference block when told to") {
  Fixture f;
  Model m = tiny_model(f);
  const int d = 8;
  Mat wf = Mat::Zero(4 * d, d);
  wf.block(2 * d, 0, d, d).setIdentity();  // read only the k - s block
  m.p("fuse.wf")->val = wf;
  Mat k = Mat::Random(5, d);
  const Var same = fuse(m, ag::constant(k), ag::constant(k));
  CHECK(same->val.cwiseAbs().maxCoeff() == 0.0);  // tanh(k - k) = 0
  Mat s = Mat::Random(5, d);
  const Var diff = fuse(m, ag::constant(k), ag::constant(s));
  const Mat expect = (k - s).array().tanh();
  CHECK((diff->val - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(diff->val.cwiseAbs().maxCoeff() <= 1.0);
  Mat bad = Mat::Random(4, d);
  CHECK_THROWS_AS(fuse(m, ag::constant(k), ag::constant(bad)), DataError);
}

TEST_CASE("span distributions: all-ones gate leaves a softmax") {
  Fixture f;
  Model m = tiny_model(f);
  Mat fused = Mat::Random(6, 8);
  auto [ps, pe] = span_distributions(m, ag::constant(fused), ag::constant(Mat::Ones(6, 1)));
  CHECK(ps->val.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(pe->val.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ps->val.minCoeff() > 0.0);
}

TEST_CASE("span distributions: a zero gate entry zeroes that token exactly") {
  Fixture f;
  Model m = tiny_model(f);
  Mat fused = Mat::Random(5, 8);
  Mat gate = Mat::Ones(5, 1);
  gate(1, 0) = 0.0;
  gate(4, 0) = 0.0;
  auto [ps, pe] = span_distributions(m, ag::constant(fused), ag::constant(gate));
  CHECK(ps->val(1, 0) == 0.0);
  CHECK(ps->val(4, 0) == 0.0);
  CHECK(pe->val(1, 0) == 0.0);
  CHECK(ps->val(0, 0) > 0.0);
  // gated entries never exceed the gate, and the total never exceeds one
  for (int i = 0; i < 5; ++i) CHECK(ps->val(i, 0) <= gate(i, 0));
  CHECK(ps->val.sum() <= 1.0 + 1e-12);
}

TEST_CASE("span distributions hand value: uniform softmax times a known gate") {
  Fixture f;
  Model m = tiny_model(f);
  Mat fused(2, 8);
  fused.row(0).setConstant(0.37);
  fused.row(1).setConstant(0.37);  // identical rows -> logits tie -> softmax (0.5, 0.5)
  Mat gate(2, 1);
  gate << 0.8, 0.2;
  auto [ps, pe] = span_distributions(m, ag::constant(fused), ag::constant(gate));
  CHECK(ps->val(0, 0) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(ps->val(1, 0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(pe->val(0, 0) == doctest::Approx(0.4).epsilon(1e-12));
  // deliberately not renormalized
  CHECK(ps->val.sum() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("span_loss values") {
  Mat perfect(3, 1), uniform(2, 1), gated_s(2, 1), gated_e(2, 1);
  perfect << 0.0, 1.0, 0.0;
  uniform << 0.5, 0.5;
  gated_s << 0.4, 0.1;
  gated_e << 0.1, 0.4;
  CHECK(span_loss(ag::constant(perfect), ag::constant(perfect), 1, 1)->val(0, 0) ==
        doctest::Approx(0.0).epsilon(1e-9));
  CHECK(span_loss(ag::constant(uniform), ag::constant(uniform), 0, 0)->val(0, 0) ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
  CHECK(span_loss(ag::constant(gated_s), ag::constant(gated_e), 0, 0)->val(0, 0) ==
        doctest::Approx(-std::log(0.4) - std::log(0.1)).epsilon(1e-9));
  CHECK(span_loss(ag::constant(gated_s), ag::constant(gated_e), 0, 0)->val(0, 0) ==
        doctest::Approx(3.2189).epsilon(1e-4));
  CHECK_THROWS_AS(span_loss(ag::constant(uniform), ag::constant(uniform), 1, 0), DataError);
  CHECK_THROWS_AS(span_loss(ag::constant(uniform), ag::constant(uniform), 0, 2), DataError);
}

TEST_CASE("answerability head values and the disabled configuration") {
  Fixture f;
  Model m = tiny_model(f);
  m.p("ans.w")->val.setZero();
  m.p("ans.b")->val.setZero();
  const Var p = answerability_prob(m, ag::constant(Mat::Random(1, 8)));
  CHECK(p->val(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(answerability_loss(p, true)->val(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  Mat conf(1, 1);
  conf << 0.8;
  CHECK(answerability_loss(ag::constant(conf), true)->val(0, 0) ==
        doctest::Approx(0.22314355).epsilon(1e-6));
  Model off = tiny_model(f, Ablation{}, /*answerability=*/false);
  CHECK_THROWS_AS(answerability_prob(off, ag::constant(Mat::Random(1, 8))), DataError);
}

TEST_CASE("total_loss is the plain sum of the four terms") {
  auto sc = [](double v) {
    Mat x(1, 1);
    x << v;
    return ag::constant(x);
  };
  CHECK(total_loss(sc(1.0), sc(0.25), sc(2.0), sc(0.5))->val(0, 0) ==
        doctest::Approx(3.75).epsilon(1e-12));
}

TEST_CASE("extract_best_span hand examples") {
  Eigen::VectorXd ps(2), pe(2);
  ps << 0.9, 0.1;
  pe << 0.2, 0.8;
  BestSpan b = extract_best_span(ps, pe, 2);
  CHECK(b.start == 0);
  CHECK(b.end == 1);
  CHECK(b.score == doctest::Approx(0.72).epsilon(1e-12));
  b = extract_best_span(ps, pe, 1);  // length cap forces s == e
  CHECK(b.start == 0);
  CHECK(b.end == 0);
  CHECK(b.score == doctest::Approx(0.18).epsilon(1e-12));
  Eigen::VectorXd u = Eigen::VectorXd::Constant(4, 0.25);
  b = extract_best_span(u, u, 4);  // ties resolve to the earliest span
  CHECK(b.start == 0);
  CHECK(b.end == 0);
  CHECK_THROWS_AS(extract_best_span(Eigen::VectorXd(), Eigen::VectorXd(), 3), DataError);
  CHECK_THROWS_AS(extract_best_span(ps, pe, 0), DataError);
}

TEST_CASE("extract_best_span agrees with a brute-force oracle") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 50);
    const int max_len = 1 + static_cast<int>(rng() % static_cast<uint64_t>(n));
    Eigen::VectorXd ps(n), pe(n);
    for (int i = 0; i < n; ++i) {
      ps(i) = unif(rng);
      pe(i) = unif(rng);
    }
    const BestSpan got = extract_best_span(ps, pe, max_len);
    const BestSpan want = brute_force_span(ps, pe, max_len);
    CHECK(got.start == want.start);
    CHECK(got.end == want.end);
    CHECK(got.score == want.score);
  }
}

TEST_CASE("forward_example: loss pieces sum, probabilities are sane") {
  Fixture f;
  Model m = tiny_model(f);
  const PackedInput p = pack(f.dialogue, f.question, f.vocab, 64);
  AnswerSpan span{1, 2, 2, "left"};  // "left" is context token 2, utterance 1
  const ExampleForward fw = forward_example(m, f.dialogue, p, span, /*answerable=*/true, 0);
  CHECK(fw.total->val(0, 0) ==
        doctest::Approx(fw.l_u->val(0, 0) + fw.l_s->val(0, 0) + fw.l_se->val(0, 0) +
                        fw.l_a->val(0, 0))
            .epsilon(1e-12));
  CHECK(fw.total->val(0, 0) > 0.0);
  CHECK(fw.p_u_pred.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fw.p_a > 0.0);
  CHECK(fw.p_a < 1.0);
  CHECK(fw.speaker_target == std::vector<int>{0});

  // unanswerable: span loss points at the CLS slot and stays positive
  const ExampleForward un = forward_example(m, f.dialogue, p, std::nullopt, false, 0);
  CHECK(un.l_se->val(0, 0) > 0.0);
  CHECK(un.l_u->val(0, 0) == 0.0);  // no key utterance to supervise
  CHECK_THROWS_AS(forward_example(m, f.dialogue, p, std::nullopt, true, 0), DataError);
}

TEST_CASE("backward of the sum equals the sum of component backwards") {
  Fixture f;
  Model m = tiny_model(f);
  const PackedInput p = pack(f.dialogue, f.question, f.vocab, 64);
  AnswerSpan span{1, 2, 2, "left"};
  m.zero_grads();
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).total);
  std::map<std::string, Mat> combined;
  for (const auto& [name, v] : m.params) combined[name] = v->grad;
  // fresh graph per component, so intermediate grads cannot double-count
  m.zero_grads();
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).l_u);
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).l_s);
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).l_se);
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).l_a);
  for (const auto& [name, v] : m.params) {
    const double scale = 1.0 + combined[name].cwiseAbs().maxCoeff();
    CHECK((v->grad - combined[name]).cwiseAbs().maxCoeff() / scale < 1e-9);
  }
}

TEST_CASE("full training loss matches finite differences") {
  // The no_detach variant is the differentiable closure of the full graph:
  // central differences see through a stop-gradient, so the comparison is only
  // meaningful when none is present. Stop-gradient blocking itself is verified
  // exactly in the decoupling tests.
  Fixture f;
  Ablation ab;
  ab.no_detach = true;
  Model m = tiny_model(f, ab);
  const PackedInput p = pack(f.dialogue, f.question, f.vocab, 64);
  AnswerSpan span{1, 2, 2, "left"};
  auto loss = [&] {
    return forward_example(m, f.dialogue, p, span, true, 0).total->val(0, 0);
  };
  m.zero_grads();
  ag::backward(forward_example(m, f.dialogue, p, span, true, 0).total);
  std::mt19937_64 rng(43);
  const double step = 1e-4;
  int checked = 0;
  for (const auto& [name, param] : m.params) {
    for (int trial = 0; trial < 3; ++trial) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng() % param->val.rows());
      const Eigen::Index j = static_cast<Eigen::Index>(rng() % param->val.cols());
      const double keep = param->val(i, j);
      param->val(i, j) = keep + step;
      const double up = loss();
      param->val(i, j) = keep - step;
      const double dn = loss();
      param->val(i, j) = keep;
      const double fd = (up - dn) / (2 * step);
      const double an = param->grad(i, j);
      if (std::abs(fd) + std::abs(an) < 1e-8) continue;
      CHECK(std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd)) < 1e-3);
      ++checked;
    }
  }
  CHECK(checked > 40);
}

TEST_CASE("predict returns valid distributions and a feasible best span") {
  Fixture f;
  Model m = tiny_model(f);
  const PackedInput p = pack(f.dialogue, f.question, f.vocab, 64);
  const SpanPrediction pr = predict(m, f.dialogue, p);
  CHECK(pr.p_start.size() == 3);
  CHECK(pr.p_end.size() == 3);
  CHECK(pr.p_start.minCoeff() >= 0.0);
  CHECK(pr.p_start.sum() <= 1.0 + 1e-9);
  CHECK(pr.best.start >= 0);
  CHECK(pr.best.end >= pr.best.start);
  CHECK(pr.best.end < 3);
  CHECK(pr.best.end - pr.best.start + 1 <= m.config.max_answer_len);
  CHECK(pr.p_a > 0.0);
  CHECK(pr.p_a < 1.0);
  CHECK(pr.best.score ==
        doctest::Approx(extract_best_span(pr.p_start, pr.p_end, m.config.max_answer_len).score));
}

TEST_CASE("ablation variants drop their loss terms") {
  Fixture f;
  const PackedInput p = pack(f.dialogue, f.question, f.vocab, 64);
  AnswerSpan span{1, 2, 2, "left"};
  Ablation nk;
  nk.no_kidb = true;
  Model mk = tiny_model(f, nk);
  const ExampleForward fk = forward_example(mk, f.dialogue, p, span, true, 0);
  CHECK(fk.l_u->val(0, 0) == 0.0);
  CHECK(fk.p_u_pred.size() == 0);
  CHECK(fk.l_s->val(0, 0) > 0.0);

  Ablation ns;
  ns.no_sidb = true;
  Model ms = tiny_model(f, ns);
  const ExampleForward fs = forward_example(ms, f.dialogue, p, span, true, 0);
  CHECK(fs.l_s->val(0, 0) == 0.0);
  CHECK(fs.p_s_pred.size() == 0);
  CHECK(fs.l_u->val(0, 0) > 0.0);

  Ablation se;
  se.speaker_emb = true;
  Model me = tiny_model(f, se);
  const ExampleForward fe = forward_example(me, f.dialogue, p, span, true, 0);
  CHECK(fe.l_s->val(0, 0) == 0.0);  // lookup table has no masked prediction task
  CHECK(me.params.count("spk_emb.table") == 1);
  CHECK(me.params.count("sidb.match_a") == 0);
}
