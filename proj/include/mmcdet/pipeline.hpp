#pragma once

// Training configuration, model assembly, the alternating training loop,
// checkpoints, model-level evaluation and the ablation grid.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcdet/alignment_losses.hpp"
#include "mmcdet/autograd.hpp"
#include "mmcdet/caption_grammar.hpp"
#include "mmcdet/eval_diag.hpp"
#include "mmcdet/fusion_teacher.hpp"
#include "mmcdet/nn.hpp"
#include "mmcdet/rng.hpp"
#include "mmcdet/student_detector.hpp"
#include "mmcdet/synth_world.hpp"

namespace mmcdet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::uint64_t seed = 0;
  std::string data_dir;  // empty: generate the corpus in memory from the keys below
  std::string grammar_path;
  std::string vocab_path;
  std::uint64_t embedding_seed = 7;

  int n_detection = 1000;
  int n_caption = 2000;
  int n_eval = 500;
  double noise_rate = 0.0;
  std::vector<std::string> base_classes = ClassSplit::shapes_default().base;
  std::vector<std::string> novel_classes = ClassSplit::shapes_default().novel;

  int stage1_epochs = 20;
  int stage2_epochs = 20;
  int caption_batch = 8;
  int detection_batch = 4;

  nn::OptimizerConfig optimizer;
  LossWeights weights;
  std::set<std::string> losses = {"det", "cap", "img", "divmlm", "distill"};

  DetectorConfig detector;
  FusionConfig fusion;

  std::string caption_mode = "full";  // full | only_concepts | single_word
  bool noise_removal = true;
  bool detach_teacher_inputs = true;  // stage 2: teacher losses do not reach the student
  bool distill_attention_positive = false;

  double eval_min_score = 0.01;
  double eval_nms_iou = 0.5;

  ClassSplit split() const { return {base_classes, novel_classes}; }

  double weight(const std::string& name) const { return losses.count(name) ? weights[name] : 0.0; }

  CorpusConfig corpus_config() const {
    CorpusConfig c;
    c.seed = seed;
    c.n_detection = n_detection;
    c.n_caption = n_caption;
    c.n_eval = n_eval;
    c.noise_rate = noise_rate;
    c.split = split();
    if (!grammar_path.empty()) c.scene.grammar = GrammarSpec::load(grammar_path);
    return c;
  }

  json to_json() const {
    return {
        {"seed", seed},
        {"data_dir", data_dir},
        {"grammar_path", grammar_path},
        {"vocab_path", vocab_path},
        {"embedding_seed", embedding_seed},
        {"n_detection", n_detection},
        {"n_caption", n_caption},
        {"n_eval", n_eval},
        {"noise_rate", noise_rate},
        {"base_classes", base_classes},
        {"novel_classes", novel_classes},
        {"stage1_epochs", stage1_epochs},
        {"stage2_epochs", stage2_epochs},
        {"caption_batch", caption_batch},
        {"detection_batch", detection_batch},
        {"learning_rate", optimizer.learning_rate},
        {"weight_decay", optimizer.weight_decay},
        {"rms_decay", optimizer.decay},
        {"clip_norm", optimizer.clip_norm},
        {"w_det", weights["det"]},
        {"w_cap", weights["cap"]},
        {"w_img", weights["img"]},
        {"w_divmlm", weights["divmlm"]},
        {"w_distill", weights["distill"]},
        {"losses", std::vector<std::string>(losses.begin(), losses.end())},
        {"embed_dim", detector.embed_dim},
        {"hidden_dim", detector.hidden_dim},
        {"n_proposals", detector.n_proposals},
        {"temperature", detector.temperature},
        {"train_random_anchors", detector.train_random_anchors},
        {"layers", fusion.layers},
        {"heads", fusion.heads},
        {"feedforward_dim", fusion.feedforward_dim},
        {"top_k", fusion.top_k},
        {"alpha", fusion.divergence_alpha},
        {"divergence_layer", fusion.divergence_layer},
        {"divergence_exponent", fusion.divergence_exponent},
        {"divergence", fusion.divergence_enabled},
        {"caption_mode", caption_mode},
        {"noise_removal", noise_removal},
        {"detach_teacher_inputs", detach_teacher_inputs},
        {"distill_attention_positive", distill_attention_positive},
        {"eval_min_score", eval_min_score},
        {"eval_nms_iou", eval_nms_iou},
    };
  }

  // Keys absent from `j` keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    TrainConfig c;
    const json known = c.to_json();
    for (const auto& [k, v] : j.items()) {
      if (!known.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("seed", c.seed);
      get("data_dir", c.data_dir);
      get("grammar_path", c.grammar_path);
      get("vocab_path", c.vocab_path);
      get("embedding_seed", c.embedding_seed);
      get("n_detection", c.n_detection);
      get("n_caption", c.n_caption);
      get("n_eval", c.n_eval);
      get("noise_rate", c.noise_rate);
      get("base_classes", c.base_classes);
      get("novel_classes", c.novel_classes);
      get("stage1_epochs", c.stage1_epochs);
      get("stage2_epochs", c.stage2_epochs);
      get("caption_batch", c.caption_batch);
      get("detection_batch", c.detection_batch);
      get("learning_rate", c.optimizer.learning_rate);
      get("weight_decay", c.optimizer.weight_decay);
      get("rms_decay", c.optimizer.decay);
      get("clip_norm", c.optimizer.clip_norm);
      get("w_det", c.weights.w["det"]);
      get("w_cap", c.weights.w["cap"]);
      get("w_img", c.weights.w["img"]);
      get("w_divmlm", c.weights.w["divmlm"]);
      get("w_distill", c.weights.w["distill"]);
      if (j.contains("losses")) {
        const auto& l = j.at("losses");
        std::vector<std::string> names;
        if (l.is_string()) {
          std::string s = l.get<std::string>();
          for (char& ch : s) ch = ch == ',' ? ' ' : ch;
          names = split_words(s);
        } else {
          names = l.get<std::vector<std::string>>();
        }
        c.losses = std::set<std::string>(names.begin(), names.end());
      }
      get("embed_dim", c.detector.embed_dim);
      get("hidden_dim", c.detector.hidden_dim);
      get("n_proposals", c.detector.n_proposals);
      get("temperature", c.detector.temperature);
      get("train_random_anchors", c.detector.train_random_anchors);
      get("layers", c.fusion.layers);
      get("heads", c.fusion.heads);
      get("feedforward_dim", c.fusion.feedforward_dim);
      get("top_k", c.fusion.top_k);
      get("alpha", c.fusion.divergence_alpha);
      get("divergence_layer", c.fusion.divergence_layer);
      get("divergence_exponent", c.fusion.divergence_exponent);
      get("divergence", c.fusion.divergence_enabled);
      get("caption_mode", c.caption_mode);
      get("noise_removal", c.noise_removal);
      get("detach_teacher_inputs", c.detach_teacher_inputs);
      get("distill_attention_positive", c.distill_attention_positive);
      get("eval_min_score", c.eval_min_score);
      get("eval_nms_iou", c.eval_nms_iou);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.fusion.model_dim = c.detector.embed_dim;
    c.validate();
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open config " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError(path, 0, e.what());
    }
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path);
    out << to_json().dump(2) << '\n';
  }

  // `value` is read as JSON when it parses, otherwise as a plain string.
  void set(const std::string& key, const std::string& value) {
    json j = to_json();
    if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    json v = json::parse(value, nullptr, false);
    j[key] = v.is_discarded() ? json(value) : v;
    *this = from_json(j);
  }

  void validate() const {
    if (n_detection < 0 || n_caption < 0 || n_eval < 0) throw ConfigError("corpus counts must be non-negative");
    if (noise_rate < 0 || noise_rate > 1) throw ConfigError("noise_rate must lie in [0,1]");
    if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("epochs must be non-negative");
    if (caption_batch <= 0 || detection_batch <= 0) throw ConfigError("batch sizes must be positive");
    if (optimizer.learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    for (const auto& [k, w] : weights.w) {
      if (w < 0) throw ConfigError("loss weight '" + k + "' must be non-negative");
    }
    for (const auto& l : losses) {
      if (!weights.w.count(l)) throw ConfigError("unknown loss '" + l + "' in losses");
    }
    if (caption_mode != "full" && caption_mode != "only_concepts" && caption_mode != "single_word") {
      throw ConfigError("caption_mode must be full, only_concepts or single_word");
    }
    detector.validate();
    FusionConfig f = fusion;
    f.model_dim = detector.embed_dim;
    f.validate();
    split().validate();
  }

  // Identity of everything a checkpoint's parameters depend on.
  std::uint64_t hash(const Vocabulary& vocab) const {
    json j = {{"seed", seed},
              {"data_dir", data_dir},
              {"embedding_seed", embedding_seed},
              {"n_detection", n_detection},
              {"n_caption", n_caption},
              {"n_eval", n_eval},
              {"noise_rate", noise_rate},
              {"base_classes", base_classes},
              {"novel_classes", novel_classes},
              {"embed_dim", detector.embed_dim},
              {"hidden_dim", detector.hidden_dim},
              {"n_proposals", detector.n_proposals},
              {"temperature", detector.temperature},
              {"anchor_sizes", detector.anchor_sizes},
              {"anchor_stride", detector.anchor_stride},
              {"grid", detector.grid},
              {"layers", fusion.layers},
              {"heads", fusion.heads},
              {"feedforward_dim", fusion.feedforward_dim},
              {"top_k", fusion.top_k},
              {"caption_mode", caption_mode}};
    std::string words;
    for (int i = 0; i < vocab.size(); ++i) words += vocab.word(i) + (vocab.is_concept(i) ? "*" : "") + " ";
    j["vocab"] = words;
    return fnv1a(j.dump());
  }
};

// ---------------------------------------------------------------------------
// Model

inline Vocabulary make_vocabulary(const TrainConfig& cfg) {
  if (!cfg.vocab_path.empty()) {
    std::ifstream in(cfg.vocab_path);
    if (!in) throw IOError("cannot open vocabulary " + cfg.vocab_path);
    return Vocabulary::parse(in, cfg.detector.embed_dim, cfg.embedding_seed, cfg.vocab_path);
  }
  const GrammarSpec g = cfg.grammar_path.empty() ? GrammarSpec::shapes_world() : GrammarSpec::load(cfg.grammar_path);
  return Vocabulary::from_grammar(g, cfg.detector.embed_dim, cfg.embedding_seed);
}

// Student, teacher and classifier heads sharing one parameter store.
class Model {
 public:
  Model(const TrainConfig& cfg, Vocabulary vocab)
      : vocab_(std::move(vocab)),
        student_(cfg.detector, store_, derive_seed(cfg.seed, 11)),
        teacher_(fusion_config(cfg), vocab_, store_, derive_seed(cfg.seed, 12)),
        base_head_(cfg.base_classes, vocab_, student_.background(), cfg.detector.temperature),
        all_head_(cfg.split().all(), vocab_, student_.background(), cfg.detector.temperature),
        concept_head_(vocab_.concept_words(), vocab_, nullptr, cfg.detector.temperature) {}

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  const Vocabulary& vocab() const { return vocab_; }
  const StudentDetector& student() const { return student_; }
  const FusionTeacher& teacher() const { return teacher_; }
  const ClassifierHead& base_head() const { return base_head_; }
  const ClassifierHead& all_head() const { return all_head_; }
  const ClassifierHead& concept_head() const { return concept_head_; }

 private:
  static FusionConfig fusion_config(const TrainConfig& cfg) {
    FusionConfig f = cfg.fusion;
    f.model_dim = cfg.detector.embed_dim;
    return f;
  }

  nn::ParameterStore store_;
  Vocabulary vocab_;
  StudentDetector student_;
  FusionTeacher teacher_;
  ClassifierHead base_head_, all_head_, concept_head_;
};

// Caption text used for training under the given caption mode.
inline std::string caption_for_mode(const std::string& text, const std::string& mode, const Vocabulary& vocab) {
  if (mode == "full") return text;
  const Caption c = parse_caption(text, vocab);
  if (c.concept_positions.empty()) return text;
  if (mode == "single_word") return vocab.word(c.concept_id(0));
  std::string out;
  for (std::size_t k = 0; k < c.num_concepts(); ++k) out += (k ? " , " : "") + vocab.word(c.concept_id(k));
  return out;
}

// Student proposals of one image, with their feature rows on a tape.
struct ImageRegions {
  FeatureMap fm;
  std::vector<Box> boxes;
  ag::Var features;
  RegionOutputs outputs;
};

inline ImageRegions image_regions(ag::Tape& tape, const StudentDetector& student, const Image& img,
                                  std::vector<int> extra_anchors = {}) {
  ImageRegions r{FeatureMap(img), {}, {}, {}};
  const auto& anc = student.anchors(img.height(), img.width());
  const Matrix raw = student.pool(r.fm, anc);
  std::vector<int> idx = student.top_anchors(student.score_anchors(raw), student.config().n_proposals);
  std::set<int> seen(idx.begin(), idx.end());
  for (int a : extra_anchors) {
    if (seen.insert(a).second) idx.push_back(a);
  }
  Matrix sel(static_cast<Eigen::Index>(idx.size()), raw.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    sel.row(static_cast<Eigen::Index>(i)) = raw.row(idx[i]);
    r.boxes.push_back(anc[idx[i]]);
  }
  r.outputs = student.forward(tape, sel);
  r.features = r.outputs.features;
  return r;
}

// Teacher pass over one caption and its image's proposals.
struct TeacherPass {
  Caption caption;
  Matrix concepts;  // m x d
  FilteredProposals filtered;
  std::vector<Box> boxes;  // boxes of P
  std::vector<int> targets;
  FusionOutput out;
  ag::Var p_features;
};

inline std::optional<TeacherPass> teacher_pass(ag::Tape& tape, const Model& model, const Caption& caption,
                                               const ag::Var& regions, const std::vector<Box>& region_boxes,
                                               int width, int height, bool detach_inputs) {
  if (caption.concept_positions.empty()) return std::nullopt;
  TeacherPass t;
  t.caption = caption;
  t.concepts = embed_tokens(caption.concept_ids(), model.vocab());
  t.filtered = prefilter_proposals(t.concepts, regions.value(), model.teacher().config().top_k);
  for (int j : t.filtered.union_order) t.boxes.push_back(region_boxes[static_cast<std::size_t>(j)]);
  const ag::Var src = detach_inputs ? ag::detach(regions) : regions;
  t.p_features = ag::gather_rows(src, t.filtered.union_order);
  const auto views = make_masked_views(caption, model.vocab());
  for (const auto& v : views) t.targets.push_back(v.target);
  t.out = model.teacher().forward(tape, views, t.p_features, t.boxes, width, height);
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  long step = 0;
  int epoch = 0;
  std::string stage;
  std::string kind;  // det | cap
  std::map<std::string, double> losses;
  double total = 0.0;

  json to_json() const {
    return {{"step", step}, {"epoch", epoch}, {"stage", stage}, {"kind", kind}, {"losses", losses}, {"total", total}};
  }
};

struct TrainState {
  std::string stage = "init";
  int stage_epoch = 0;  // epochs completed in `stage`
  int global_epoch = 0;
  long global_step = 0;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'C', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Trainer {
 public:
  using Sink = std::function<void(const StepLog&)>;

  Trainer(TrainConfig cfg, std::shared_ptr<const Corpus> corpus)
      : cfg_(std::move(cfg)), corpus_(std::move(corpus)), model_(std::make_unique<Model>(cfg_, make_vocabulary(cfg_))),
        opt_(cfg_.optimizer) {
    cfg_.validate();
    if (!corpus_) throw ConfigError("trainer needs a corpus");
  }

  const TrainConfig& config() const { return cfg_; }
  // Settings outside the config hash (epochs, weights, flags) may change between stages.
  void set_config(const TrainConfig& cfg) {
    if (cfg.hash(model_->vocab()) != cfg_.hash(model_->vocab())) throw ConfigError("config hash differs from the model's");
    cfg_ = cfg;
    auto st = opt_.state();
    const long steps = opt_.steps();
    opt_ = nn::RmsProp(cfg_.optimizer);
    opt_.state() = std::move(st);
    opt_.set_steps(steps);
  }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  const TrainState& state() const { return state_; }
  std::uint64_t config_hash() const { return cfg_.hash(model_->vocab()); }

  // Runs `epochs` epochs of `stage`, continuing the stage's epoch count when the
  // state already belongs to it.
  void train(Stage stage, int epochs, const Sink& sink = {}) {
    if (state_.stage != stage_name(stage)) {
      state_.stage = stage_name(stage);
      state_.stage_epoch = 0;
    }
    for (int e = 0; e < epochs; ++e) run_epoch(stage, sink);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    put(out, kCheckpointVersion);
    put(out, config_hash());
    put_string(out, state_.stage);
    put(out, static_cast<std::int64_t>(state_.stage_epoch));
    put(out, static_cast<std::int64_t>(state_.global_epoch));
    put(out, static_cast<std::int64_t>(state_.global_step));
    put(out, static_cast<std::int64_t>(opt_.steps()));
    const auto params = model_->store().all();
    put(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) put_matrix(out, p->name, p->value);
    put(out, static_cast<std::uint32_t>(opt_.state().size()));
    for (const auto& [name, m] : opt_.state()) put_matrix(out, name, m);
    if (!out) throw IOError("short write to checkpoint " + path.string());
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCheckpointMagic)) throw ParseError(path.string(), 0, "not a checkpoint");
    if (get<std::uint32_t>(in) != kCheckpointVersion) throw ParseError(path.string(), 0, "unsupported checkpoint version");
    if (get<std::uint64_t>(in) != config_hash()) throw ConfigError("checkpoint config hash does not match the config");
    TrainState s;
    s.stage = get_string(in);
    s.stage_epoch = static_cast<int>(get<std::int64_t>(in));
    s.global_epoch = static_cast<int>(get<std::int64_t>(in));
    s.global_step = static_cast<long>(get<std::int64_t>(in));
    const auto opt_steps = get<std::int64_t>(in);
    const auto n = get<std::uint32_t>(in);
    std::map<std::string, Matrix> values;
    for (std::uint32_t i = 0; i < n; ++i) {
      auto [name, m] = get_matrix(in);
      values[name] = std::move(m);
    }
    const auto ns = get<std::uint32_t>(in);
    std::map<std::string, Matrix> opt_state;
    for (std::uint32_t i = 0; i < ns; ++i) {
      auto [name, m] = get_matrix(in);
      opt_state[name] = std::move(m);
    }
    if (!in) throw ParseError(path.string(), 0, "truncated checkpoint");
    for (auto* p : model_->store().all()) {
      const auto it = values.find(p->name);
      if (it == values.end()) throw ParseError(path.string(), 0, "checkpoint lacks parameter " + p->name);
      if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
        throw ParseError(path.string(), 0, "shape mismatch for parameter " + p->name);
      }
      p->value = it->second;
    }
    state_ = s;
    opt_.state() = opt_state;
    opt_.set_steps(opt_steps);
  }

 private:
  bool caption_side_active(Stage stage) const {
    for (const auto& n : stage_components(stage)) {
      if (n != "det" && cfg_.weight(n) != 0.0) return true;
    }
    return false;
  }

  void run_epoch(Stage stage, const Sink& sink) {
    const auto& det = corpus_->detection;
    const auto& cap = corpus_->captions;
    Rng erng(derive_seed(cfg_.seed, 101, static_cast<std::uint64_t>(state_.global_epoch)));
    std::vector<int> det_order(det.size()), cap_order(cap.size());
    std::iota(det_order.begin(), det_order.end(), 0);
    std::iota(cap_order.begin(), cap_order.end(), 0);
    erng.shuffle(det_order);
    erng.shuffle(cap_order);

    const int n_det = static_cast<int>(det.size()) / cfg_.detection_batch;
    const int n_cap = static_cast<int>(cap.size()) / cfg_.caption_batch;
    const int n_steps = n_cap > 0 ? n_cap : n_det;
    const bool caption_side = caption_side_active(stage) && n_cap > 0;
    for (int b = 0; b < n_steps; ++b) {
      if (n_det > 0 && cfg_.weight("det") != 0.0) {
        const int db = b % n_det;
        std::vector<int> idx(det_order.begin() + db * cfg_.detection_batch,
                             det_order.begin() + (db + 1) * cfg_.detection_batch);
        emit(sink, detection_step(stage, idx));
      }
      if (caption_side) {
        std::vector<int> idx(cap_order.begin() + b * cfg_.caption_batch, cap_order.begin() + (b + 1) * cfg_.caption_batch);
        emit(sink, caption_step(stage, idx));
      }
    }
    ++state_.global_epoch;
    ++state_.stage_epoch;
  }

  void emit(const Sink& sink, StepLog log) {
    if (!std::isfinite(log.total)) {
      throw Error("non-finite loss at step " + std::to_string(log.step) + " (" + log.kind + ")");
    }
    if (sink) sink(log);
  }

  StepLog finish(Stage stage, const std::string& kind, ag::Tape& tape, const std::map<std::string, ag::Var>& parts) {
    ag::Var total = weighted_total(tape, parts, cfg_.weights);
    model_->store().zero_grad();
    tape.backward(total);
    opt_.step(model_->store());
    StepLog log;
    log.step = state_.global_step++;
    log.epoch = state_.global_epoch;
    log.stage = stage_name(stage);
    log.kind = kind;
    for (const auto& [k, v] : parts) log.losses[k] = v.scalar();
    log.total = total.scalar();
    return log;
  }

  StepLog detection_step(Stage stage, const std::vector<int>& batch) {
    ag::Tape tape;
    Rng rng(derive_seed(cfg_.seed, 202, static_cast<std::uint64_t>(state_.global_step)));
    const auto& student = model_->student();
    ag::Var det = tape.constant(Matrix::Zero(1, 1));
    for (int i : batch) {
      const auto& s = corpus_->detection[static_cast<std::size_t>(i)];
      const auto& anc = student.anchors(s.image.height(), s.image.width());
      std::vector<int> extra;
      for (const auto& g : s.boxes) {
        int best = 0;
        double best_iou = -1;
        for (std::size_t a = 0; a < anc.size(); ++a) {
          const double v = iou(anc[a], g);
          if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(a);
          }
        }
        extra.push_back(best);
      }
      for (int r = 0; r < cfg_.detector.train_random_anchors; ++r) {
        extra.push_back(rng.uniform_int(0, static_cast<int>(anc.size()) - 1));
      }
      ImageRegions reg = image_regions(tape, student, s.image, extra);
      std::vector<int> labels;
      for (const auto& l : s.labels) labels.push_back(model_->base_head().index_of(l));
      ag::Var logits = model_->base_head().logits(tape, reg.features, true);
      const auto dl = detection_loss(tape, reg.boxes, logits, reg.outputs.deltas, reg.outputs.objectness, s.boxes,
                                     labels, cfg_.detector);
      det = ag::add(det, dl.total);
    }
    det = ag::scale(det, 1.0 / static_cast<double>(batch.size()));
    return finish(stage, "det", tape, {{"det", det}});
  }

  StepLog caption_step(Stage stage, const std::vector<int>& batch) {
    ag::Tape tape;
    const auto comps = stage_components(stage);
    auto active = [&](const std::string& n) {
      return std::find(comps.begin(), comps.end(), n) != comps.end() && cfg_.weight(n) != 0.0;
    };
    const bool use_cap = active("cap"), use_img = active("img"), use_div = active("divmlm"),
               use_distill = active("distill");
    const bool need_teacher = use_div || use_distill;
    const bool detach_inputs = stage == Stage::stage2 && cfg_.detach_teacher_inputs;
    const auto& vocab = model_->vocab();

    std::vector<ag::Var> words, regions;
    std::vector<DistillPair> pairs;
    ag::Var img = tape.constant(Matrix::Zero(1, 1)), div = tape.constant(Matrix::Zero(1, 1));
    int n_img = 0, n_div = 0;
    for (int i : batch) {
      const auto& s = corpus_->captions[static_cast<std::size_t>(i)];
      const Caption caption = parse_caption(caption_for_mode(s.caption, cfg_.caption_mode, vocab), vocab);
      ImageRegions reg = image_regions(tape, model_->student(), s.image);
      words.push_back(tape.constant(embed_tokens(caption.word_ids, vocab)));
      regions.push_back(reg.features);
      std::vector<std::string> concepts;
      for (auto id : caption.concept_ids()) concepts.push_back(vocab.word(id));
      if (use_img && !concepts.empty()) {
        img = ag::add(img, image_pseudo_loss(tape, model_->student().global_region(tape, reg.fm), concepts,
                                             model_->concept_head()));
        ++n_img;
      }
      if (!need_teacher) continue;
      auto tp = teacher_pass(tape, *model_, caption, reg.features, reg.boxes, s.image.width(), s.image.height(),
                             detach_inputs);
      if (!tp) continue;
      if (use_div) {
        div = ag::add(div, dmlm_loss(tp->out.attention, tp->filtered, tp->out.mask_logits, tp->targets, cfg_.fusion));
        ++n_div;
      }
      if (use_distill) {
        DistillPair p{tape.constant(tp->concepts), reg.features, ag::gather_rows(reg.features, tp->filtered.union_order),
                      ag::detach(tp->out.attention), {}};
        for (const auto& f : predict_masked_and_flag_noise(tp->out.mask_logits.value(), tp->targets)) {
          p.noise.push_back(f.is_noise);
        }
        pairs.push_back(std::move(p));
      }
    }
    std::map<std::string, ag::Var> parts;
    if (use_cap) parts["cap"] = contrastive_caption_loss(words, regions);
    if (use_img) parts["img"] = n_img ? ag::scale(img, 1.0 / n_img) : img;
    if (use_div) parts["divmlm"] = n_div ? ag::scale(div, 1.0 / n_div) : div;
    if (use_distill) {
      DistillOptions o;
      o.remove_noise = cfg_.noise_removal;
      o.attention_positive_in_denominator = cfg_.distill_attention_positive;
      parts["distill"] = distill_loss(tape, pairs, o);
    }
    return finish(stage, "cap", tape, parts);
  }

  template <typename T>
  static void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  template <typename T>
  static T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ParseError("checkpoint", 0, "truncated checkpoint");
    return v;
  }
  static void put_string(std::ostream& out, const std::string& s) {
    put(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static std::string get_string(std::istream& in) {
    const auto n = get<std::uint32_t>(in);
    if (n > (1u << 20)) throw ParseError("checkpoint", 0, "implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
  }
  static void put_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
    put_string(out, name);
    put(out, static_cast<std::int64_t>(m.rows()));
    put(out, static_cast<std::int64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put(out, m(i, j));
    }
  }
  static std::pair<std::string, Matrix> get_matrix(std::istream& in) {
    std::string name = get_string(in);
    const auto r = get<std::int64_t>(in), c = get<std::int64_t>(in);
    if (r < 0 || c < 0 || r * c > (1 << 26)) throw ParseError("checkpoint", 0, "implausible matrix shape");
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = get<double>(in);
    }
    return {std::move(name), std::move(m)};
  }

  TrainConfig cfg_;
  std::shared_ptr<const Corpus> corpus_;
  std::unique_ptr<Model> model_;
  nn::RmsProp opt_;
  TrainState state_;
};

// ---------------------------------------------------------------------------
// Evaluation

inline DetectionResult detect(const Model& model, const Image& img, double min_score = 0.01, double nms_iou = 0.5) {
  const auto props = model.student().propose_regions(img, model.student().config().n_proposals);
  const auto& head = model.all_head();
  const auto& classes = head.classes();
  std::vector<std::vector<Box>> boxes(classes.size());
  std::vector<std::vector<double>> scores(classes.size());
  for (const auto& p : props) {
    const Eigen::RowVectorXd logit = head.logits(p.feature, true);
    const Eigen::RowVectorXd prob = (logit.array() - logit.maxCoeff()).exp();
    const double z = prob.sum();
    const Box b = p.refined_box(img.width(), img.height());
    if (!b.valid()) continue;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const double s = prob(static_cast<Eigen::Index>(c)) / z;
      if (s >= min_score) {
        boxes[c].push_back(b);
        scores[c].push_back(s);
      }
    }
  }
  DetectionResult out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (int k : nms(boxes[c], scores[c], nms_iou)) out.push_back({boxes[c][k], classes[c], scores[c][k]});
  }
  return out;
}

// Teacher forward on a caption with the student's proposals for its image, off-tape.
struct CaptionDiagnosis {
  Caption caption;
  Matrix mask_logits;
  Matrix attention;
  std::vector<int> targets;
  std::vector<Box> boxes;
};

inline std::optional<CaptionDiagnosis> diagnose_caption(const Model& model, const Image& img, const std::string& text) {
  ag::Tape tape;
  const Caption caption = parse_caption(text, model.vocab());
  ImageRegions reg = image_regions(tape, model.student(), img);
  auto tp = teacher_pass(tape, model, caption, reg.features, reg.boxes, img.width(), img.height(), true);
  if (!tp) return std::nullopt;
  return CaptionDiagnosis{caption, tp->out.mask_logits.value(), tp->out.attention.value(), tp->targets, tp->boxes};
}

struct TeacherMetrics {
  double mlm_accuracy = 0.0;
  double attention_tv = 0.0;
  int views = 0;
  int multi_concept_captions = 0;
};

inline TeacherMetrics teacher_metrics(const Model& model, const std::vector<EvalSample>& samples,
                                      std::vector<AttentionDump>* dumps = nullptr) {
  TeacherMetrics m;
  int correct = 0;
  std::vector<Eigen::MatrixXd> records;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto d = diagnose_caption(model, samples[i].image, samples[i].caption);
    if (!d) continue;
    for (const auto& p : predict_masked_and_flag_noise(d->mask_logits, d->targets)) {
      correct += p.is_noise ? 0 : 1;
      ++m.views;
    }
    if (d->attention.rows() >= 2) {
      records.push_back(d->attention);
      ++m.multi_concept_captions;
    }
    if (dumps) {
      AttentionDump a;
      a.caption_id = static_cast<int>(i);
      for (auto id : d->caption.concept_ids()) a.concepts.push_back(model.vocab().word(id));
      a.boxes = d->boxes;
      a.scores = d->attention;
      dumps->push_back(std::move(a));
    }
  }
  if (m.views == 0) throw DegenerateInput("no masked concepts in the evaluation captions");
  m.mlm_accuracy = double(correct) / m.views;
  m.attention_tv = attention_diversity(records);
  return m;
}

inline EvalReport evaluate(const Model& model, const std::vector<EvalSample>& samples, const TrainConfig& cfg,
                           Ap50Report* ap_out = nullptr, std::vector<AttentionDump>* dumps = nullptr) {
  std::vector<DetectionResult> results;
  std::vector<GroundTruth> truth;
  for (const auto& s : samples) {
    results.push_back(detect(model, s.image, cfg.eval_min_score, cfg.eval_nms_iou));
    truth.push_back({s.boxes, s.labels});
  }
  const Ap50Report ap = compute_ap50(results, truth, cfg.split());
  EvalReport rep;
  rep.ap50_novel = ap.novel;
  rep.ap50_base = ap.base;
  rep.ap50_all = ap.all;
  for (const auto& [c, a] : ap.per_class) rep.per_class_ap[c] = a.ap;
  const auto tm = teacher_metrics(model, samples, dumps);
  rep.mlm_accuracy = tm.mlm_accuracy;
  rep.attention_tv = tm.attention_tv;
  if (ap_out) *ap_out = ap;
  return rep;
}

// Noise flags of the teacher on captions with planted-noise metadata. The
// metadata is read here only, never by training.
struct NoiseFlagReport {
  int concepts = 0, planted = 0, flagged = 0, hits = 0;
  double precision() const { return flagged ? double(hits) / flagged : 0.0; }
  double recall() const { return planted ? double(hits) / planted : 0.0; }
  double chance_precision() const { return concepts ? double(planted) / concepts : 0.0; }
  double chance_recall() const { return concepts ? double(flagged) / concepts : 0.0; }
};

inline NoiseFlagReport noise_flag_report(const Model& model, const std::vector<CaptionSample>& samples) {
  NoiseFlagReport r;
  for (const auto& s : samples) {
    auto d = diagnose_caption(model, s.image, s.caption);
    if (!d) continue;
    const auto flags = predict_masked_and_flag_noise(d->mask_logits, d->targets);
    for (std::size_t k = 0; k < flags.size(); ++k) {
      const bool planted = s.noise && s.noise->concept_index == static_cast<int>(k);
      ++r.concepts;
      r.planted += planted;
      r.flagged += flags[k].is_noise;
      r.hits += planted && flags[k].is_noise;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Runs

inline std::shared_ptr<const Corpus> load_corpus(const TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    if (!std::filesystem::exists(std::filesystem::path(cfg.data_dir) / "manifest")) {
      throw ConfigError("dataset not found in " + cfg.data_dir);
    }
    return std::make_shared<const Corpus>(read_dataset(cfg.data_dir));
  }
  return std::make_shared<const Corpus>(generate_corpus(cfg.corpus_config()));
}

// Append-only record of a run directory.
class RunManifest {
 public:
  explicit RunManifest(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    const auto p = dir_ / "run.json";
    if (std::filesystem::exists(p)) {
      std::ifstream in(p);
      try {
        data_ = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ParseError(p.string(), 0, e.what());
      }
    } else {
      data_ = {{"stages", json::array()}};
    }
  }

  const json& data() const { return data_; }
  const std::filesystem::path& dir() const { return dir_; }

  void record(const Trainer& t, const std::string& stage, const std::filesystem::path& checkpoint,
              const std::vector<json>& history) {
    data_["config_hash"] = t.config_hash();
    data_["config"] = t.config().to_json();
    data_["stages"].push_back({{"stage", stage},
                               {"epoch", t.state().global_epoch},
                               {"stage_epoch", t.state().stage_epoch},
                               {"step", t.state().global_step},
                               {"checkpoint", checkpoint.string()},
                               {"history", history}});
    std::ofstream out(dir_ / "run.json");
    if (!out) throw IOError("cannot write " + (dir_ / "run.json").string());
    out << data_.dump(2) << '\n';
  }

 private:
  std::filesystem::path dir_;
  json data_;
};

// Trains `stage` until its epoch target, logging every step to log.jsonl and
// writing <stage>.ckpt plus a per-epoch history entry.
inline std::filesystem::path run_stage(Trainer& trainer, Stage stage, int target_epochs, RunManifest& manifest) {
  std::ofstream log(manifest.dir() / "log.jsonl", std::ios::app);
  if (!log) throw IOError("cannot write " + (manifest.dir() / "log.jsonl").string());
  std::vector<json> history;
  std::map<std::string, double> sums;
  std::map<std::string, int> counts;
  auto sink = [&](const StepLog& s) {
    log << s.to_json().dump() << '\n';
    for (const auto& [k, v] : s.losses) {
      sums[k] += v;
      counts[k] += 1;
    }
  };
  const int done = trainer.state().stage == stage_name(stage) ? trainer.state().stage_epoch : 0;
  if (done == 0) trainer.train(stage, 0);
  for (int e = done; e < target_epochs; ++e) {
    sums.clear();
    counts.clear();
    trainer.train(stage, 1, sink);
    json h = {{"stage_epoch", trainer.state().stage_epoch}};
    for (const auto& [k, v] : sums) h[k] = v / counts[k];
    history.push_back(h);
    trainer.save(manifest.dir() / (std::string(stage_name(stage)) + ".ckpt"));
  }
  const auto ckpt = manifest.dir() / (std::string(stage_name(stage)) + ".ckpt");
  if (history.empty()) trainer.save(ckpt);
  manifest.record(trainer, stage_name(stage), ckpt, history);
  return ckpt;
}

inline std::filesystem::path run_baseline(Trainer& t, RunManifest& m) { return run_stage(t, Stage::baseline, t.config().stage1_epochs, m); }
inline std::filesystem::path run_stage1(Trainer& t, RunManifest& m) { return run_stage(t, Stage::stage1, t.config().stage1_epochs, m); }
inline std::filesystem::path run_stage2(Trainer& t, RunManifest& m) { return run_stage(t, Stage::stage2, t.config().stage2_epochs, m); }

// One configuration of the ablation grid.
struct AblationRow {
  std::string name;
  TrainConfig config;
  bool two_stage = false;  // stage 1 followed by stage 2
  Stage first = Stage::stage1;
};

inline std::vector<AblationRow> ablation_rows(const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto row = [&](std::string name, std::set<std::string> losses, Stage first, bool two_stage) {
    AblationRow r{std::move(name), base, two_stage, first};
    r.config.losses = std::move(losses);
    return r;
  };
  rows.push_back(row("det", {"det"}, Stage::baseline, false));
  rows.push_back(row("det+cap", {"det", "cap"}, Stage::baseline, false));
  rows.push_back(row("det+cap+img", {"det", "cap", "img"}, Stage::baseline, false));
  rows.push_back(row("stage1", {"det", "cap", "img", "divmlm"}, Stage::stage1, false));
  {
    // Teacher trained by plain masked language modelling, no divergence term.
    auto r = row("stage2_without_divmlm", {"det", "cap", "img", "divmlm", "distill"}, Stage::stage1, true);
    r.config.fusion.divergence_enabled = false;
    rows.push_back(r);
  }
  rows.push_back(row("stage2_all", {"det", "cap", "img", "divmlm", "distill"}, Stage::stage1, true));
  for (const char* mode : {"only_concepts", "single_word"}) {
    auto r = row(std::string("caption_") + mode, {"det", "cap", "img", "divmlm", "distill"}, Stage::stage1, true);
    r.config.caption_mode = mode;
    rows.push_back(r);
  }
  {
    auto r = row("noise_removal_off", {"det", "cap", "img", "divmlm", "distill"}, Stage::stage1, true);
    r.config.noise_removal = false;
    rows.push_back(r);
  }
  return rows;
}

inline EvalReport run_ablation_row(const AblationRow& row, std::shared_ptr<const Corpus> corpus,
                                   const std::filesystem::path& dir) {
  Trainer t(row.config, corpus);
  RunManifest m(dir);
  run_stage(t, row.first, row.config.stage1_epochs, m);
  if (row.two_stage) run_stage2(t, m);
  return evaluate(t.model(), corpus->eval, row.config);
}

// Runs every row and writes results.tsv in `dir`.
inline std::vector<EvalReport> run_ablation_grid(const TrainConfig& cfg, const std::filesystem::path& dir,
                                                 const std::function<void(const std::string&, const EvalReport&)>& on_row = {}) {
  const auto corpus = load_corpus(cfg);
  std::vector<std::string> names;
  std::vector<EvalReport> reports;
  for (const auto& row : ablation_rows(cfg)) {
    reports.push_back(run_ablation_row(row, corpus, dir / row.name));
    names.push_back(row.name);
    if (on_row) on_row(row.name, reports.back());
  }
  std::filesystem::create_directories(dir);
  write_results_table(dir / "results.tsv", names, reports);
  return reports;
}

}  // namespace mmcdet
