// Command-line front end: corpus generation, training, evaluation,
// prediction and ablation runs over the dialogue MRC model.

#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "dmrc/harness.hpp"

namespace {

using dmrc::ModelConfig;
using dmrc::TrainConfig;

struct ConfigOverrides {
  std::optional<int> d, heads, total_layers, decoupling_layers, max_len, max_answer_len;
  std::optional<bool> answerability;
  std::optional<int> batch_size, epochs;
  std::optional<double> lr;
  std::optional<uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<size_t> max_vocab;
};

void add_config_flags(CLI::App* cmd, ConfigOverrides& o, std::string& config_path,
                      std::string& preset) {
  cmd->add_option("--config", config_path, "JSON config file with model/train sections");
  cmd->add_option("--preset", preset, "desk | molweni-paper | friendsqa-paper");
  cmd->add_option("--d", o.d, "hidden width");
  cmd->add_option("--heads", o.heads, "attention heads");
  cmd->add_option("--layers", o.total_layers, "total transformer layers (L_all)");
  cmd->add_option("--decoupling-layers", o.decoupling_layers, "decoupling layers (L)");
  cmd->add_option("--max-len", o.max_len, "maximum packed sequence length");
  cmd->add_option("--max-answer-len", o.max_answer_len, "maximum answer span length");
  cmd->add_option("--answerability", o.answerability, "enable the answerability head");
  cmd->add_option("--batch-size", o.batch_size, "batch size");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--lr", o.lr, "peak learning rate");
  cmd->add_option("--seed", o.seed, "rng seed");
  cmd->add_option("--variant", o.variant, "full | no_kidb | no_sidb | speaker_emb | no_detach");
  cmd->add_option("--max-vocab", o.max_vocab, "vocabulary cap");
}

void build_configs(const ConfigOverrides& o, const std::string& config_path,
                   const std::string& preset, ModelConfig& mc, TrainConfig& tc) {
  if (!preset.empty()) dmrc::apply_preset(preset, mc, tc);
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw dmrc::DataError("cannot open config " + config_path);
    nlohmann::json j;
    in >> j;
    const auto& m = j.value("model", nlohmann::json::object());
    mc.d = m.value("d", mc.d);
    mc.h = m.value("h", mc.h);
    mc.total_layers = m.value("total_layers", mc.total_layers);
    mc.decoupling_layers = m.value("decoupling_layers", mc.decoupling_layers);
    mc.ff_width = m.value("ff_width", mc.ff_width);
    mc.max_len = m.value("max_len", mc.max_len);
    mc.max_answer_len = m.value("max_answer_len", mc.max_answer_len);
    mc.answerability_enabled = m.value("answerability_enabled", mc.answerability_enabled);
    const auto& t = j.value("train", nlohmann::json::object());
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.learning_rate = t.value("learning_rate", tc.learning_rate);
    tc.max_seq_len = t.value("max_seq_len", tc.max_seq_len);
    tc.epochs = t.value("epochs", tc.epochs);
    tc.seed = t.value("seed", tc.seed);
    tc.warmup_fraction = t.value("warmup_fraction", tc.warmup_fraction);
    tc.split_stride = t.value("split_stride", tc.split_stride);
    tc.variant = t.value("variant", tc.variant);
    tc.max_vocab = t.value("max_vocab", tc.max_vocab);
  }
  // flags win over file and preset
  if (o.d) mc.d = *o.d;
  if (o.heads) mc.h = *o.heads;
  if (o.total_layers) mc.total_layers = *o.total_layers;
  if (o.decoupling_layers) mc.decoupling_layers = *o.decoupling_layers;
  if (o.max_len) {
    mc.max_len = *o.max_len;
    tc.max_seq_len = *o.max_len;
  }
  if (o.max_answer_len) mc.max_answer_len = *o.max_answer_len;
  if (o.answerability) mc.answerability_enabled = *o.answerability;
  if (o.batch_size) tc.batch_size = *o.batch_size;
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.lr) tc.learning_rate = *o.lr;
  if (o.seed) tc.seed = *o.seed;
  if (o.variant) tc.variant = *o.variant;
  if (o.max_vocab) tc.max_vocab = *o.max_vocab;
  tc.max_seq_len = std::min(tc.max_seq_len, mc.max_len);
  mc.validate();
  tc.validate();
}

std::ostream* open_log(const std::string& path, std::ofstream& holder) {
  if (path.empty()) return &std::cerr;
  holder.open(path);
  if (!holder) throw dmrc::DataError("cannot open log " + path);
  return &holder;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-party dialogue MRC: decoupled key-utterance/speaker span model"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dialogue QA corpus");
  std::string gen_out = "synthetic.json";
  uint64_t gen_seed = 7;
  dmrc::SyntheticConfig syn;
  gen->add_option("--out", gen_out, "output corpus JSON");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--dialogues", syn.num_dialogues, "number of dialogues");
  gen->add_option("--questions-per-dialogue", syn.questions_per_dialogue, "questions per dialogue");
  gen->add_option("--speakers", syn.num_speakers, "speaker pool size (2-9)");
  gen->add_option("--min-utterances", syn.min_utterances, "min utterances per dialogue");
  gen->add_option("--max-utterances", syn.max_utterances, "max utterances per dialogue");
  gen->add_option("--topics", syn.num_topics, "topic vocabulary size");
  gen->add_option("--unanswerable-fraction", syn.unanswerable_fraction,
                  "fraction of unanswerable questions");
  gen->add_option("--introduce-prob", syn.introduce_prob,
                  "probability an utterance names its speaker");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a corpus");
  std::string tr_data, tr_out = "model.ckpt", tr_config, tr_preset, tr_log;
  ConfigOverrides tr_o;
  tr->add_option("--train", tr_data, "training corpus JSON")->required();
  tr->add_option("--out", tr_out, "checkpoint output path");
  tr->add_option("--log", tr_log, "JSON-lines training log (default stderr)");
  add_config_flags(tr, tr_o, tr_config, tr_preset);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_report;
  uint64_t ev_seed = 1234;
  ev->add_option("--data", ev_data, "evaluation corpus JSON")->required();
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--report", ev_report, "write the report JSON here (default stdout)");
  ev->add_option("--seed", ev_seed, "seed for the masked speaker-accuracy probe");

  // predict
  auto* pr = app.add_subcommand("predict", "emit per-question predictions");
  std::string pr_data, pr_ckpt, pr_out;
  pr->add_option("--data", pr_data, "corpus JSON")->required();
  pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--out", pr_out, "predictions JSON (default stdout)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train + evaluate an ablation variant");
  std::string ab_train, ab_test, ab_variant = "full", ab_config, ab_preset, ab_report, ab_log;
  ConfigOverrides ab_o;
  ab->add_option("--train", ab_train, "training corpus JSON")->required();
  ab->add_option("--test", ab_test, "test corpus JSON")->required();
  ab->add_option("--ablate-variant", ab_variant, "full | no_kidb | no_sidb | speaker_emb | no_detach");
  ab->add_option("--report", ab_report, "report JSON output (default stdout)");
  ab->add_option("--log", ab_log, "JSON-lines training log (default stderr)");
  add_config_flags(ab, ab_o, ab_config, ab_preset);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      std::mt19937_64 rng(gen_seed);
      const dmrc::Corpus corpus = dmrc::generate_synthetic(syn, rng);
      dmrc::write_corpus_json(corpus, gen_out);
      std::cout << "wrote " << corpus.items.size() << " questions over "
                << corpus.dialogues.size() << " dialogues to " << gen_out << "\n";
    } else if (tr->parsed()) {
      ModelConfig mc;
      TrainConfig tc;
      build_configs(tr_o, tr_config, tr_preset, mc, tc);
      const dmrc::Corpus corpus = dmrc::load_squad_style(tr_data, /*strict=*/false);
      const dmrc::Vocabulary vocab = dmrc::build_vocabulary(corpus, tc.max_vocab);
      std::mt19937_64 rng(tc.seed);
      dmrc::Model model = dmrc::build_model(mc, dmrc::ablation_from_variant(tc.variant), vocab,
                                            dmrc::collect_speaker_names(corpus), rng);
      std::ofstream log_holder;
      dmrc::train(model, corpus, tc, open_log(tr_log, log_holder));
      dmrc::save_checkpoint(model, tr_out);
      std::cout << "saved checkpoint to " << tr_out << "\n";
    } else if (ev->parsed()) {
      const dmrc::Model model = dmrc::load_checkpoint(ev_ckpt);
      const dmrc::Corpus corpus = dmrc::load_squad_style(ev_data, /*strict=*/false);
      TrainConfig tc;
      tc.max_seq_len = model.config.max_len;
      const dmrc::EvalReport report = dmrc::evaluate(model, corpus, tc, ev_seed);
      if (ev_report.empty()) {
        std::cout << report.to_json() << "\n";
      } else {
        std::ofstream out(ev_report);
        out << report.to_json() << "\n";
        std::cout << "EM " << report.em << " F1 " << report.f1 << " -> " << ev_report << "\n";
      }
    } else if (pr->parsed()) {
      const dmrc::Model model = dmrc::load_checkpoint(pr_ckpt);
      const dmrc::Corpus corpus = dmrc::load_squad_style(pr_data, /*strict=*/false);
      TrainConfig tc;
      tc.max_seq_len = model.config.max_len;
      const std::string out = dmrc::predict_corpus_json(model, corpus, tc);
      if (pr_out.empty()) {
        std::cout << out << "\n";
      } else {
        std::ofstream f(pr_out);
        f << out << "\n";
        std::cout << "wrote predictions to " << pr_out << "\n";
      }
    } else if (ab->parsed()) {
      ModelConfig mc;
      TrainConfig tc;
      build_configs(ab_o, ab_config, ab_preset, mc, tc);
      const dmrc::Corpus train_corpus = dmrc::load_squad_style(ab_train, /*strict=*/false);
      const dmrc::Corpus test_corpus = dmrc::load_squad_style(ab_test, /*strict=*/false);
      std::ofstream log_holder;
      const dmrc::EvalReport report = dmrc::ablate(ab_variant, train_corpus, test_corpus, mc, tc,
                                                   open_log(ab_log, log_holder));
      if (ab_report.empty()) {
        std::cout << report.to_json() << "\n";
      } else {
        std::ofstream out(ab_report);
        out << report.to_json() << "\n";
        std::cout << "EM " << report.em << " F1 " << report.f1 << " -> " << ab_report << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
