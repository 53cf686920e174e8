#pragma once

// Shapes-world benchmark: procedurally placed coloured shapes, base-class box
// annotations, relational captions over all classes, and a line-delimited
// JSON manifest with lossless PPM images on disk.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcdet/caption_grammar.hpp"
#include "mmcdet/error.hpp"
#include "mmcdet/geometry.hpp"
#include "mmcdet/rng.hpp"

namespace mmcdet {

// 8-bit RGB raster. Intensity accessors return values in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, std::uint8_t fill = 0)
      : h_(height), w_(width), c_(channels), data_(static_cast<std::size_t>(height * width * channels), fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }

  double at(int y, int x, int ch) const { return data_[index(y, x, ch)] / 255.0; }
  std::uint8_t raw(int y, int x, int ch) const { return data_[index(y, x, ch)]; }
  void set_raw(int y, int x, int ch, std::uint8_t v) { data_[index(y, x, ch)] = v; }

  const std::vector<std::uint8_t>& bytes() const { return data_; }
  std::vector<std::uint8_t>& bytes() { return data_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int y, int x, int ch) const {
    return (static_cast<std::size_t>(y) * w_ + x) * c_ + ch;
  }

  int h_ = 0, w_ = 0, c_ = 3;
  std::vector<std::uint8_t> data_;
};

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError("cannot write " + path.string());
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.bytes().data()), static_cast<std::streamsize>(img.bytes().size()));
  if (!out) throw IOError("short write to " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw IOError("not an 8-bit P6 image: " + path.string());
  in.get();
  Image img(h, w, 3);
  in.read(reinterpret_cast<char*>(img.bytes().data()), static_cast<std::streamsize>(img.bytes().size()));
  if (in.gcount() != static_cast<std::streamsize>(img.bytes().size())) {
    throw IOError("truncated image " + path.string());
  }
  return img;
}

struct ClassSplit {
  std::vector<std::string> base;
  std::vector<std::string> novel;

  static ClassSplit shapes_default() {
    return {{"circle", "square", "triangle", "cross"}, {"star", "ring"}};
  }

  std::vector<std::string> all() const {
    std::vector<std::string> out = base;
    out.insert(out.end(), novel.begin(), novel.end());
    return out;
  }
  bool is_base(const std::string& c) const { return std::find(base.begin(), base.end(), c) != base.end(); }
  bool is_novel(const std::string& c) const { return std::find(novel.begin(), novel.end(), c) != novel.end(); }

  void validate() const {
    if (base.empty() && novel.empty()) throw ConfigError("empty class split");
    std::set<std::string> b(base.begin(), base.end());
    for (const auto& n : novel) {
      if (b.count(n)) throw ConfigError("class '" + n + "' is both base and novel");
    }
  }
};

struct ColorDef {
  std::string name;
  std::uint8_t r, g, b;
};

inline std::vector<ColorDef> default_colors() {
  return {{"red", 255, 0, 0}, {"green", 0, 255, 0}, {"blue", 0, 0, 255}, {"yellow", 255, 255, 0}};
}

struct SceneObject {
  std::string class_name;
  std::string color;
  int cx = 0, cy = 0;  // pixel centre
  int size = 0;        // even side length of the bounding square

  Box box() const {
    const int half = size / 2;
    return {double(cx - half), double(cy - half), double(cx + half), double(cy + half)};
  }
};

struct RelationFact {
  int subject = 0;
  std::string predicate;  // above | below | left_of | right_of
  int object = 0;
};

// A caption concept swapped for a class absent from the scene. Test-only
// ground truth: training code never reads it.
struct PlantedNoise {
  int concept_index = 0;
  std::string original_class;
  std::string planted_class;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 64, width = 64;
  std::vector<SceneObject> objects;
  std::vector<RelationFact> relations;
  std::string caption;
  std::optional<PlantedNoise> noise;
};

struct DetectionSample {
  Image image;
  std::vector<Box> boxes;
  std::vector<std::string> labels;
};

struct CaptionSample {
  Image image;
  std::string caption;
  std::optional<PlantedNoise> noise;
};

// Fully annotated scene for evaluation: boxes for base and novel objects.
struct EvalSample {
  Image image;
  std::vector<Box> boxes;
  std::vector<std::string> labels;
  std::string caption;
};

struct SceneOptions {
  int height = 64, width = 64;
  int min_objects = 1, max_objects = 3;
  int min_size = 12, max_size = 22;  // even sizes only
  int relation_margin = 4;           // pixels between centres
  int min_gap = 2;                   // pixels between bounding boxes
  std::vector<std::string> classes;  // pool to draw from; empty = split.all()
  // Eval scenes: first object drawn from base, second from novel.
  bool require_base_and_novel = false;
  GrammarSpec grammar = GrammarSpec::shapes_world();
  std::vector<ColorDef> colors = default_colors();
};

inline bool relation_holds(const SceneObject& s, const std::string& predicate, const SceneObject& o, int margin) {
  if (predicate == "above") return s.cy + margin <= o.cy;
  if (predicate == "below") return s.cy >= o.cy + margin;
  if (predicate == "left_of") return s.cx + margin <= o.cx;
  if (predicate == "right_of") return s.cx >= o.cx + margin;
  return false;
}

// Pixel-centre membership test in shape-normalised coordinates, u and v in
// [-1, 1) across the bounding square.
inline bool shape_contains(const std::string& shape, double u, double v) {
  if (u < -1.0 || u >= 1.0 || v < -1.0 || v >= 1.0) return false;
  const double r2 = u * u + v * v;
  if (shape == "square") return true;
  if (shape == "circle") return r2 <= 1.0;
  if (shape == "ring") return r2 <= 1.0 && r2 >= 0.55 * 0.55;
  if (shape == "triangle") return std::abs(u) <= 0.5 * (v + 1.0);
  if (shape == "cross") return std::abs(u) <= 1.0 / 3.0 || std::abs(v) <= 1.0 / 3.0;
  if (shape == "star") {
    // Five-point star, outer radius 1, inner radius 0.45, point up.
    constexpr int kPoints = 10;
    double px[kPoints], py[kPoints];
    for (int k = 0; k < kPoints; ++k) {
      const double rad = (k % 2 == 0) ? 1.0 : 0.45;
      const double ang = -M_PI / 2 + k * M_PI / 5;
      px[k] = rad * std::cos(ang);
      py[k] = rad * std::sin(ang);
    }
    bool in = false;
    for (int i = 0, j = kPoints - 1; i < kPoints; j = i++) {
      if ((py[i] > v) != (py[j] > v) && u < (px[j] - px[i]) * (v - py[i]) / (py[j] - py[i]) + px[i]) in = !in;
    }
    return in;
  }
  throw ConfigError("unknown shape '" + shape + "'");
}

// Anti-aliasing-free rasterisation on a black background.
inline Image render_image(const SceneSpec& spec, const std::vector<ColorDef>& colors = default_colors()) {
  Image img(spec.height, spec.width, 3, 0);
  for (const auto& obj : spec.objects) {
    const auto col = std::find_if(colors.begin(), colors.end(), [&](const ColorDef& c) { return c.name == obj.color; });
    if (col == colors.end()) throw ConfigError("unknown color '" + obj.color + "'");
    const double half = obj.size / 2.0;
    const Box b = obj.box();
    for (int y = std::max(0, int(b.y1)); y < std::min(spec.height, int(b.y2)); ++y) {
      for (int x = std::max(0, int(b.x1)); x < std::min(spec.width, int(b.x2)); ++x) {
        const double u = (x + 0.5 - obj.cx) / half;
        const double v = (y + 0.5 - obj.cy) / half;
        if (!shape_contains(obj.class_name, u, v)) continue;
        img.set_raw(y, x, 0, col->r);
        img.set_raw(y, x, 1, col->g);
        img.set_raw(y, x, 2, col->b);
      }
    }
  }
  return img;
}

inline std::string fill_template(std::string tpl, const std::vector<std::pair<std::string, std::string>>& slots) {
  for (const auto& [key, value] : slots) {
    const auto at = tpl.find(key);
    if (at == std::string::npos) throw ConfigError("template slot " + key + " missing");
    tpl.replace(at, key.size(), value);
  }
  return tpl;
}

namespace detail {

inline std::vector<SceneObject> place_objects(Rng& rng, const ClassSplit& split, const SceneOptions& opt) {
  const auto pool = opt.classes.empty() ? split.all() : opt.classes;
  if (pool.empty()) throw ConfigError("empty class pool");
  int count = rng.uniform_int(opt.min_objects, opt.max_objects);
  if (opt.require_base_and_novel) count = std::max(count, 2);
  std::vector<SceneObject> objs;
  for (int k = 0; k < count; ++k) {
    std::string cls;
    if (opt.require_base_and_novel && k == 0) {
      cls = split.base[rng.uniform_int(0, int(split.base.size()) - 1)];
    } else if (opt.require_base_and_novel && k == 1) {
      cls = split.novel[rng.uniform_int(0, int(split.novel.size()) - 1)];
    } else {
      cls = pool[rng.uniform_int(0, int(pool.size()) - 1)];
    }
    const std::string color = opt.colors[rng.uniform_int(0, int(opt.colors.size()) - 1)].name;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      SceneObject o;
      o.class_name = cls;
      o.color = color;
      o.size = 2 * rng.uniform_int(opt.min_size / 2, opt.max_size / 2);
      const int half = o.size / 2;
      o.cx = rng.uniform_int(half, opt.width - half);
      o.cy = rng.uniform_int(half, opt.height - half);
      const Box b = o.box();
      placed = true;
      for (const auto& other : objs) {
        const Box ob = other.box();
        const bool apart = b.x2 + opt.min_gap <= ob.x1 || ob.x2 + opt.min_gap <= b.x1 ||
                           b.y2 + opt.min_gap <= ob.y1 || ob.y2 + opt.min_gap <= b.y1;
        if (!apart) {
          placed = false;
          break;
        }
      }
      if (placed) objs.push_back(o);
    }
    if (!placed && k < (opt.require_base_and_novel ? 2 : 1)) {
      throw ConfigError("could not place required object; image too small for object sizes");
    }
  }
  return objs;
}

}  // namespace detail

struct SceneBundle {
  SceneSpec spec;
  std::optional<DetectionSample> detection;  // present when the scene holds a base object
  CaptionSample caption;
  EvalSample eval;
};

// Builds one scene. Detection annotations cover base classes only; with
// probability noise_rate one caption concept is replaced by a class absent
// from the scene.
inline SceneBundle generate_scene(std::uint64_t seed, const ClassSplit& split, double noise_rate,
                                  const SceneOptions& opt = {}) {
  split.validate();
  if (noise_rate < 0.0 || noise_rate > 1.0) throw ConfigError("noise_rate must lie in [0, 1]");
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.height = opt.height;
  spec.width = opt.width;
  spec.objects = detail::place_objects(rng, split, opt);

  // Mention order is a random permutation of the objects.
  std::vector<int> order(spec.objects.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<std::string> mentioned;  // concept words in caption order
  std::vector<std::string> clauses;
  std::size_t at = 0;
  const std::vector<std::string> predicates = {"above", "below", "left_of", "right_of"};
  while (at < order.size()) {
    const SceneObject& s = spec.objects[order[at]];
    if (at + 1 < order.size()) {
      const SceneObject& o = spec.objects[order[at + 1]];
      std::vector<std::string> holding;
      for (const auto& p : predicates) {
        if (opt.grammar.phrases.count(p) && relation_holds(s, p, o, opt.relation_margin)) holding.push_back(p);
      }
      if (!holding.empty()) {
        const auto& pred = holding[rng.uniform_int(0, int(holding.size()) - 1)];
        spec.relations.push_back({order[at], pred, order[at + 1]});
        clauses.push_back(fill_template(opt.grammar.pair_template, {{"{color}", s.color},
                                                                    {"{concept}", s.class_name},
                                                                    {"{relation}", opt.grammar.phrases.at(pred)},
                                                                    {"{color}", o.color},
                                                                    {"{concept}", o.class_name}}));
        mentioned.push_back(s.class_name);
        mentioned.push_back(o.class_name);
        at += 2;
        continue;
      }
    }
    clauses.push_back(fill_template(opt.grammar.single_template, {{"{color}", s.color}, {"{concept}", s.class_name}}));
    mentioned.push_back(s.class_name);
    at += 1;
  }

  if (noise_rate > 0.0 && rng.bernoulli(noise_rate)) {
    std::set<std::string> present;
    for (const auto& o : spec.objects) present.insert(o.class_name);
    std::vector<std::string> absent;
    for (const auto& c : split.all()) {
      if (!present.count(c)) absent.push_back(c);
    }
    if (!absent.empty()) {
      PlantedNoise n;
      n.concept_index = rng.uniform_int(0, int(mentioned.size()) - 1);
      n.original_class = mentioned[n.concept_index];
      n.planted_class = absent[rng.uniform_int(0, int(absent.size()) - 1)];
      spec.noise = n;
    }
  }

  // Join clauses, then swap the planted concept occurrence in place.
  std::string caption;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    if (i > 0) caption += " " + opt.grammar.join_word + " ";
    caption += clauses[i];
  }
  if (spec.noise) {
    std::set<std::string> concept_set(opt.grammar.concepts.begin(), opt.grammar.concepts.end());
    auto words = split_words(caption);
    int seen = 0;
    for (auto& w : words) {
      if (!concept_set.count(w)) continue;
      if (seen++ == spec.noise->concept_index) {
        w = spec.noise->planted_class;
        break;
      }
    }
    caption.clear();
    for (const auto& w : words) caption += (caption.empty() ? "" : " ") + w;
  }
  spec.caption = caption;

  SceneBundle out;
  const Image img = render_image(spec, opt.colors);
  out.spec = spec;
  out.caption = CaptionSample{img, spec.caption, spec.noise};
  DetectionSample det{img, {}, {}};
  EvalSample ev{img, {}, {}, spec.caption};
  for (const auto& o : spec.objects) {
    ev.boxes.push_back(o.box());
    ev.labels.push_back(o.class_name);
    if (split.is_base(o.class_name)) {
      det.boxes.push_back(o.box());
      det.labels.push_back(o.class_name);
    }
  }
  if (!det.boxes.empty()) out.detection = std::move(det);
  out.eval = std::move(ev);
  return out;
}

struct CorpusConfig {
  std::uint64_t seed = 0;
  int n_detection = 1000;
  int n_caption = 2000;
  int n_eval = 500;
  double noise_rate = 0.0;
  ClassSplit split = ClassSplit::shapes_default();
  SceneOptions scene;
};

struct Corpus {
  std::vector<DetectionSample> detection;
  std::vector<CaptionSample> captions;
  std::vector<EvalSample> eval;

  bool empty() const { return detection.empty() && captions.empty() && eval.empty(); }
};

// Pure function of the config. Detection scenes draw from base classes only;
// caption scenes from all classes; eval scenes hold at least one base and one
// novel object and are never noised.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.split.validate();
  Corpus c;
  SceneOptions det_opt = cfg.scene;
  det_opt.classes = cfg.split.base;
  for (int i = 0; c.detection.size() < static_cast<std::size_t>(cfg.n_detection); ++i) {
    auto b = generate_scene(derive_seed(cfg.seed, 1, i), cfg.split, 0.0, det_opt);
    if (b.detection) c.detection.push_back(std::move(*b.detection));
  }
  SceneOptions cap_opt = cfg.scene;
  for (int i = 0; i < cfg.n_caption; ++i) {
    c.captions.push_back(generate_scene(derive_seed(cfg.seed, 2, i), cfg.split, cfg.noise_rate, cap_opt).caption);
  }
  SceneOptions ev_opt = cfg.scene;
  ev_opt.require_base_and_novel = !cfg.split.base.empty() && !cfg.split.novel.empty();
  for (int i = 0; i < cfg.n_eval; ++i) {
    c.eval.push_back(generate_scene(derive_seed(cfg.seed, 3, i), cfg.split, 0.0, ev_opt).eval);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest (one JSON record per line) + <dir>/images/*.ppm

inline nlohmann::json box_to_json(const Box& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("box must be an array of 4 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline void write_dataset(const std::filesystem::path& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IOError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest");
  if (!manifest) throw IOError("cannot write " + (dir / "manifest").string());

  auto emit = [&](const std::string& kind, std::size_t i, const Image& img, const std::vector<Box>* boxes,
                  const std::vector<std::string>* labels, const std::string* caption,
                  const std::optional<PlantedNoise>* noise) {
    char name[64];
    std::snprintf(name, sizeof name, "images/%s_%06zu.ppm", kind.c_str(), i);
    write_ppm(img, dir / name);
    nlohmann::json rec;
    rec["kind"] = kind;
    rec["image"] = name;
    rec["boxes"] = nlohmann::json::array();
    rec["labels"] = nlohmann::json::array();
    if (boxes) {
      for (const auto& b : *boxes) rec["boxes"].push_back(box_to_json(b));
      rec["labels"] = *labels;
    }
    rec["caption"] = caption ? *caption : "";
    if (noise && noise->has_value()) {
      rec["noise"] = {{"concept_index", (*noise)->concept_index},
                      {"original", (*noise)->original_class},
                      {"planted", (*noise)->planted_class}};
    } else {
      rec["noise"] = nullptr;
    }
    manifest << rec.dump() << "\n";
  };
  for (std::size_t i = 0; i < corpus.detection.size(); ++i) {
    const auto& s = corpus.detection[i];
    emit("detection", i, s.image, &s.boxes, &s.labels, nullptr, nullptr);
  }
  for (std::size_t i = 0; i < corpus.captions.size(); ++i) {
    const auto& s = corpus.captions[i];
    emit("caption", i, s.image, nullptr, nullptr, &s.caption, &s.noise);
  }
  for (std::size_t i = 0; i < corpus.eval.size(); ++i) {
    const auto& s = corpus.eval[i];
    emit("eval", i, s.image, &s.boxes, &s.labels, &s.caption, nullptr);
  }
  if (!manifest) throw IOError("short write to manifest");
}

inline Corpus read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest";
  std::ifstream in(path);
  if (!in) throw IOError("cannot open " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      const std::string kind = rec.at("kind").get<std::string>();
      Image img = read_ppm(dir / rec.at("image").get<std::string>());
      std::vector<Box> boxes;
      for (const auto& b : rec.at("boxes")) boxes.push_back(box_from_json(b));
      auto labels = rec.at("labels").get<std::vector<std::string>>();
      if (labels.size() != boxes.size()) throw Error("boxes and labels differ in length");
      const std::string caption = rec.at("caption").get<std::string>();
      std::optional<PlantedNoise> noise;
      if (!rec.at("noise").is_null()) {
        const auto& n = rec.at("noise");
        noise = PlantedNoise{n.at("concept_index").get<int>(), n.at("original").get<std::string>(),
                             n.at("planted").get<std::string>()};
      }
      if (kind == "detection") {
        corpus.detection.push_back({std::move(img), std::move(boxes), std::move(labels)});
      } else if (kind == "caption") {
        corpus.captions.push_back({std::move(img), caption, noise});
      } else if (kind == "eval") {
        corpus.eval.push_back({std::move(img), std::move(boxes), std::move(labels), caption});
      } else {
        throw Error("unknown record kind '" + kind + "'");
      }
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return corpus;
}

}  // namespace mmcdet
