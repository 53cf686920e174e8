// Command-line front end: dataset generation, staged training, evaluation,
// the ablation grid and attention dumps. Every command prints JSON lines to
// stdout; errors print one JSON line to stderr and exit nonzero.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mmcdet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mmcdet;

namespace {

void emit(const json& j) { std::cout << j.dump() << std::endl; }

// Options shared by every subcommand: a config file plus `--key value`
// overrides taken from the arguments CLI11 did not recognise.
struct ConfigOptions {
  std::string file;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "JSON config file");
    app->allow_extras();
  }

  TrainConfig resolve(const CLI::App* app) const {
    TrainConfig cfg = file.empty() ? TrainConfig{} : TrainConfig::load(file);
    const auto extras = app->remaining();
    for (std::size_t i = 0; i < extras.size(); ++i) {
      const std::string& a = extras[i];
      if (a.rfind("--", 0) != 0 || a.size() == 2) throw ConfigError("unexpected argument '" + a + "'");
      std::string key = a.substr(2), value;
      const auto eq = key.find('=');
      if (eq != std::string::npos) {
        value = key.substr(eq + 1);
        key = key.substr(0, eq);
      } else {
        if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " needs a value");
        value = extras[++i];
      }
      cfg.set(key, value);
    }
    cfg.validate();
    return cfg;
  }
};

json manifest_summary(const RunManifest& m) {
  const auto& st = m.data().at("stages").back();
  return {{"event", "stage_done"},     {"stage", st.at("stage")},       {"epoch", st.at("epoch")},
          {"step", st.at("step")},     {"checkpoint", st.at("checkpoint")}, {"config_hash", m.data().at("config_hash")}};
}

int cmd_generate(const TrainConfig& cfg, const fs::path& out) {
  const Corpus corpus = generate_corpus(cfg.corpus_config());
  write_dataset(out, corpus);
  emit({{"event", "dataset"},
        {"dir", out.string()},
        {"detection", corpus.detection.size()},
        {"caption", corpus.captions.size()},
        {"eval", corpus.eval.size()}});
  return 0;
}

int cmd_train(const TrainConfig& cfg, const std::string& stage_arg, const fs::path& out, const std::string& init,
              bool resume) {
  const Stage stage = parse_stage(stage_arg);
  const auto corpus = load_corpus(cfg);
  Trainer trainer(cfg, corpus);
  RunManifest manifest(out);
  const fs::path own = out / (std::string(stage_name(stage)) + ".ckpt");
  if (resume && fs::exists(own)) {
    trainer.load(own);
  } else if (stage == Stage::stage2) {
    const fs::path from = init.empty() ? out / "stage1.ckpt" : fs::path(init);
    if (!fs::exists(from)) throw ConfigError("stage 2 needs a stage-1 checkpoint, none at " + from.string());
    trainer.load(from);
  } else if (!init.empty()) {
    trainer.load(init);
  }
  emit({{"event", "train_start"},
        {"stage", stage_name(stage)},
        {"config_hash", trainer.config_hash()},
        {"resumed_epoch", trainer.state().stage == stage_name(stage) ? trainer.state().stage_epoch : 0}});
  const int target = stage == Stage::stage2 ? cfg.stage2_epochs : cfg.stage1_epochs;
  run_stage(trainer, stage, target, manifest);
  emit(manifest_summary(manifest));
  return 0;
}

Trainer load_trained(const TrainConfig& cfg, std::shared_ptr<const Corpus> corpus, const std::string& checkpoint) {
  Trainer t(cfg, std::move(corpus));
  t.load(checkpoint);
  return t;
}

int cmd_evaluate(const TrainConfig& cfg, const std::string& checkpoint, const std::string& out) {
  const auto corpus = load_corpus(cfg);
  const Trainer t = load_trained(cfg, corpus, checkpoint);
  Ap50Report ap;
  std::vector<AttentionDump> dumps;
  const EvalReport rep = evaluate(t.model(), corpus->eval, cfg, &ap, out.empty() ? nullptr : &dumps);
  if (!out.empty()) emit_plot_data(rep, ap, dumps, out);
  json j = rep.to_json();
  j["event"] = "evaluation";
  j["checkpoint"] = checkpoint;
  emit(j);
  return 0;
}

int cmd_ablate(const TrainConfig& cfg, const fs::path& out) {
  run_ablation_grid(cfg, out, [](const std::string& name, const EvalReport& r) {
    json j = r.to_json();
    j.erase("per_class_ap");
    j["event"] = "ablation_row";
    j["row"] = name;
    emit(j);
  });
  emit({{"event", "results"}, {"table", (out / "results.tsv").string()}});
  return 0;
}

int cmd_diagnose(const TrainConfig& cfg, const std::string& checkpoint, int count, const std::string& out) {
  const auto corpus = load_corpus(cfg);
  const Trainer t = load_trained(cfg, corpus, checkpoint);
  const auto& vocab = t.model().vocab();
  std::vector<AttentionDump> dumps;
  const int n = std::min<int>(count, static_cast<int>(corpus->eval.size()));
  for (int i = 0; i < n; ++i) {
    const auto& s = corpus->eval[static_cast<std::size_t>(i)];
    const auto d = diagnose_caption(t.model(), s.image, s.caption);
    if (!d) continue;
    json rec = {{"event", "attention"}, {"caption_id", i}, {"caption", s.caption}};
    json rows = json::array();
    const auto flags = predict_masked_and_flag_noise(d->mask_logits, d->targets);
    const auto concepts = d->caption.concept_ids();
    for (Eigen::Index r = 0; r < d->attention.rows(); ++r) {
      const auto k = static_cast<std::size_t>(r);
      std::vector<double> w(d->attention.row(r).data(), d->attention.row(r).data() + d->attention.cols());
      rows.push_back({{"concept", vocab.word(concepts[k])},
                      {"predicted", vocab.word(flags[k].predicted)},
                      {"noise_flag", flags[k].is_noise},
                      {"weights", w}});
    }
    json boxes = json::array();
    for (const auto& b : d->boxes) boxes.push_back(box_to_json(b));
    rec["rows"] = rows;
    rec["boxes"] = boxes;
    rec["tv"] = d->attention.rows() >= 2 ? pairwise_tv(d->attention) : 0.0;
    emit(rec);
    AttentionDump a;
    a.caption_id = i;
    for (auto id : concepts) a.concepts.push_back(vocab.word(id));
    a.boxes = d->boxes;
    a.scores = d->attention;
    dumps.push_back(std::move(a));
  }
  if (!out.empty()) emit_plot_data(EvalReport{}, Ap50Report{}, dumps, out);
  return 0;
}

const char* error_kind(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const ParseError*>(&e)) return "ParseError";
  if (dynamic_cast<const IOError*>(&e)) return "IOError";
  if (dynamic_cast<const UnknownToken*>(&e)) return "UnknownToken";
  if (dynamic_cast<const UnknownConcept*>(&e)) return "UnknownConcept";
  if (dynamic_cast<const EmptyCaption*>(&e)) return "EmptyCaption";
  if (dynamic_cast<const DegenerateInput*>(&e)) return "DegenerateInput";
  return "Error";
}

int fail(const std::string& kind, const std::string& what, int code) {
  std::cerr << json{{"event", "error"}, {"kind", kind}, {"message", what}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmcdet: captioned open-vocabulary detection on a synthetic shapes world"};
  app.require_subcommand(1);

  ConfigOptions gen_cfg, train_cfg, eval_cfg, ablate_cfg, diag_cfg;
  std::string gen_out, train_out = "runs/train", stage, init, eval_ckpt, eval_out, ablate_out = "runs/ablation",
                       diag_ckpt, diag_out;
  bool resume = false;
  int diag_count = 20;

  auto* gen = app.add_subcommand("generate-data", "Render the synthetic corpus to a directory");
  gen_cfg.attach(gen);
  gen->add_option("-o,--out", gen_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one stage, writing log.jsonl, run.json and a checkpoint");
  train_cfg.attach(train);
  train->add_option("--stage", stage, "baseline, 1 or 2")->required()->check(CLI::IsMember({"baseline", "1", "2"}));
  train->add_option("-o,--out", train_out, "Run directory");
  train->add_option("--init", init, "Checkpoint to start from (stage 2 defaults to <out>/stage1.ckpt)");
  train->add_flag("--resume", resume, "Continue from <out>/<stage>.ckpt when present");

  auto* ev = app.add_subcommand("evaluate", "AP50, masked-concept accuracy and attention diversity");
  eval_cfg.attach(ev);
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("-o,--out", eval_out, "Directory for report.json and plot data");

  auto* ab = app.add_subcommand("ablate", "Run the ablation grid and write results.tsv");
  ablate_cfg.attach(ab);
  ab->add_option("-o,--out", ablate_out, "Output directory");

  auto* diag = app.add_subcommand("diagnose-attention", "Dump teacher attention rows for evaluation captions");
  diag_cfg.attach(diag);
  diag->add_option("--checkpoint", diag_ckpt, "Checkpoint file")->required();
  diag->add_option("-n,--count", diag_count, "Number of captions")->check(CLI::PositiveNumber);
  diag->add_option("-o,--out", diag_out, "Directory for attention.tsv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_generate(gen_cfg.resolve(gen), gen_out);
    if (*train) return cmd_train(train_cfg.resolve(train), stage, train_out, init, resume);
    if (*ev) return cmd_evaluate(eval_cfg.resolve(ev), eval_ckpt, eval_out);
    if (*ab) return cmd_ablate(ablate_cfg.resolve(ab), ablate_out);
    if (*diag) return cmd_diagnose(diag_cfg.resolve(diag), diag_ckpt, diag_count, diag_out);
  } catch (const ConfigError& e) {
    return fail("ConfigError", e.what(), 2);
  } catch (const Error& e) {
    return fail(error_kind(e), e.what(), 3);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 4);
  }
  return 1;
}
