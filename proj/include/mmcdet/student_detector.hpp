#pragma once

// Toy open-vocabulary detector.
//
// The backbone is fixed: a foreground mask plus colour channels summarised by
// integral images, pooled over each box as a grid of foreground fractions,
// four context strips, mean foreground colour and box size. Everything after
// pooling is learned: a shared trunk feeds the region projection (r_j, unit
// norm, dimension d), the objectness logit and class-agnostic box deltas.
// Classification scores r_j against frozen class-name embeddings and a
// learnable background vector.

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mmcdet/autograd.hpp"
#include "mmcdet/caption_grammar.hpp"
#include "mmcdet/geometry.hpp"
#include "mmcdet/nn.hpp"
#include "mmcdet/synth_world.hpp"

namespace mmcdet {

using ag::Matrix;
using ag::Var;

struct DetectorConfig {
  int n_proposals = 16;
  int embed_dim = 32;
  int hidden_dim = 64;
  double temperature = 1.0 / 0.07;
  int anchor_stride = 4;
  std::vector<int> anchor_sizes = {12, 16, 20, 24};
  int grid = 5;
  double positive_iou = 0.5;
  double negative_iou = 0.3;
  double smooth_l1_beta = 1.0;
  int train_random_anchors = 8;  // extra random anchors in each detection-loss batch

  void validate() const {
    if (n_proposals <= 0) throw ConfigError("n_proposals must be positive");
    if (embed_dim <= 0 || hidden_dim <= 0) throw ConfigError("detector dimensions must be positive");
    if (temperature <= 0) throw ConfigError("temperature must be positive");
    if (anchor_stride <= 0 || anchor_sizes.empty()) throw ConfigError("anchor grid is empty");
    if (grid <= 0) throw ConfigError("grid must be positive");
  }
};

inline constexpr const char* kBackground = "bg";

// Summed-area tables over the foreground mask and masked colour channels.
class FeatureMap {
 public:
  static constexpr double kForegroundThreshold = 0.2;

  explicit FeatureMap(const Image& img) : h_(img.height()), w_(img.width()) {
    for (auto& t : tables_) t.assign(static_cast<std::size_t>((h_ + 1) * (w_ + 1)), 0.0);
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
        const double fg = std::max({r, g, b}) > kForegroundThreshold ? 1.0 : 0.0;
        const double vals[4] = {fg, fg * r, fg * g, fg * b};
        for (int c = 0; c < 4; ++c) {
          tables_[c][idx(y + 1, x + 1)] =
              vals[c] + tables_[c][idx(y, x + 1)] + tables_[c][idx(y + 1, x)] - tables_[c][idx(y, x)];
        }
      }
    }
  }

  int height() const { return h_; }
  int width() const { return w_; }

  // Sum of channel c over integer pixel rectangle [x1,x2) x [y1,y2), clipped.
  double sum(int c, int x1, int y1, int x2, int y2) const {
    x1 = std::clamp(x1, 0, w_);
    x2 = std::clamp(x2, 0, w_);
    y1 = std::clamp(y1, 0, h_);
    y2 = std::clamp(y2, 0, h_);
    if (x2 <= x1 || y2 <= y1) return 0.0;
    const auto& t = tables_[c];
    return t[idx(y2, x2)] - t[idx(y1, x2)] - t[idx(y2, x1)] + t[idx(y1, x1)];
  }

  double fraction(int x1, int y1, int x2, int y2) const {
    const int cx1 = std::clamp(x1, 0, w_), cx2 = std::clamp(x2, 0, w_);
    const int cy1 = std::clamp(y1, 0, h_), cy2 = std::clamp(y2, 0, h_);
    const double area = double(std::max(0, cx2 - cx1)) * std::max(0, cy2 - cy1);
    return area > 0 ? sum(0, x1, y1, x2, y2) / area : 0.0;
  }

 private:
  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * (w_ + 1) + x; }

  int h_, w_;
  std::array<std::vector<double>, 4> tables_;
};

inline int raw_feature_dim(const DetectorConfig& cfg) { return cfg.grid * cfg.grid + 4 + 3 + 2; }

inline Eigen::RowVectorXd pool_box(const FeatureMap& fm, const Box& box, int grid) {
  Eigen::RowVectorXd f(grid * grid + 9);
  const double w = box.width(), h = box.height();
  int k = 0;
  for (int gy = 0; gy < grid; ++gy) {
    const int y1 = int(std::lround(box.y1 + gy * h / grid)), y2 = int(std::lround(box.y1 + (gy + 1) * h / grid));
    for (int gx = 0; gx < grid; ++gx) {
      const int x1 = int(std::lround(box.x1 + gx * w / grid)), x2 = int(std::lround(box.x1 + (gx + 1) * w / grid));
      f(k++) = fm.fraction(x1, y1, x2, y2);
    }
  }
  const int bx1 = int(std::lround(box.x1)), by1 = int(std::lround(box.y1));
  const int bx2 = int(std::lround(box.x2)), by2 = int(std::lround(box.y2));
  const int sx = std::max(1, int(std::lround(0.25 * w))), sy = std::max(1, int(std::lround(0.25 * h)));
  f(k++) = fm.fraction(bx1, by1 - sy, bx2, by1);  // above
  f(k++) = fm.fraction(bx1, by2, bx2, by2 + sy);  // below
  f(k++) = fm.fraction(bx1 - sx, by1, bx1, by2);  // left
  f(k++) = fm.fraction(bx2, by1, bx2 + sx, by2);  // right
  const double fg = std::max(1.0, fm.sum(0, bx1, by1, bx2, by2));
  for (int c = 1; c <= 3; ++c) f(k++) = fm.sum(c, bx1, by1, bx2, by2) / fg;
  f(k++) = w / fm.width();
  f(k++) = h / fm.height();
  return f;
}

inline std::vector<Box> make_anchor_grid(const DetectorConfig& cfg, int height, int width) {
  std::vector<Box> anchors;
  for (int cy = cfg.anchor_stride / 2; cy < height; cy += cfg.anchor_stride) {
    for (int cx = cfg.anchor_stride / 2; cx < width; cx += cfg.anchor_stride) {
      for (int s : cfg.anchor_sizes) {
        const Box b{double(cx - s / 2), double(cy - s / 2), double(cx + s / 2), double(cy + s / 2)};
        if (b.inside(width, height)) anchors.push_back(b);
      }
    }
  }
  return anchors;
}

struct RegionProposal {
  Box box;                     // anchor box the feature was pooled from
  Eigen::RowVectorXd feature;  // r_j, unit norm
  double objectness = 0.0;     // sigmoid of the objectness logit
  std::array<double, 4> delta{};
  int anchor_index = -1;

  Box refined_box(int width, int height) const {
    return clip_box(decode_box_delta(box, delta), width, height);
  }
};

// Per-region outputs recorded on a tape.
struct RegionOutputs {
  Var features;    // n x d, unit rows
  Var objectness;  // n x 1 logits
  Var deltas;      // n x 4
};

// Frozen class-name embeddings plus the learnable background vector.
class ClassifierHead {
 public:
  ClassifierHead(std::vector<std::string> classes, const Vocabulary& vocab, ag::Parameter* background,
                 double temperature)
      : classes_(std::move(classes)), background_(background), temperature_(temperature) {
    if (classes_.empty()) throw ConfigError("classifier needs at least one class");
    embeddings_.resize(static_cast<Eigen::Index>(classes_.size()), vocab.embedding_dim());
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      if (!vocab.contains(classes_[i]) || !vocab.is_concept(vocab.id(classes_[i]))) throw UnknownConcept(classes_[i]);
      embeddings_.row(static_cast<Eigen::Index>(i)) = vocab.embedding(classes_[i]);
    }
  }

  // For tests: explicit embeddings, one row per class.
  ClassifierHead(std::vector<std::string> classes, Matrix embeddings, ag::Parameter* background, double temperature)
      : classes_(std::move(classes)), embeddings_(std::move(embeddings)), background_(background),
        temperature_(temperature) {
    if (classes_.empty()) throw ConfigError("classifier needs at least one class");
  }

  const std::vector<std::string>& classes() const { return classes_; }
  const Matrix& embeddings() const { return embeddings_; }
  double temperature() const { return temperature_; }
  int index_of(const std::string& c) const {
    const auto it = std::find(classes_.begin(), classes_.end(), c);
    if (it == classes_.end()) throw UnknownConcept(c);
    return static_cast<int>(it - classes_.begin());
  }
  // Column of the background logit when with_background is set.
  int background_index() const { return static_cast<int>(classes_.size()); }

  Eigen::RowVectorXd background_unit() const {
    if (!background_) throw ConfigError("classifier has no background vector");
    return background_->value.row(0) / std::max(background_->value.norm(), 1e-12);
  }

  // n x |classes| (+1 background column) temperature-scaled dot products.
  Var logits(ag::Tape& tape, const Var& regions, bool with_background) const {
    Var cls = ag::matmul_nt(regions, tape.constant(embeddings_));
    if (with_background) {
      if (!background_) throw ConfigError("classifier has no background vector");
      Var bg = ag::l2_normalize_rows(tape.parameter(*background_));
      cls = ag::concat_cols({cls, ag::matmul_nt(regions, bg)});
    }
    return ag::scale(cls, temperature_);
  }

  Eigen::RowVectorXd logits(const Eigen::RowVectorXd& r, bool with_background) const {
    Eigen::RowVectorXd out(embeddings_.rows() + (with_background ? 1 : 0));
    out.head(embeddings_.rows()) = r * embeddings_.transpose();
    if (with_background) out(embeddings_.rows()) = r.dot(background_unit());
    return out * temperature_;
  }

 private:
  std::vector<std::string> classes_;
  Matrix embeddings_;
  ag::Parameter* background_;
  double temperature_;
};

struct Classification {
  std::string label;
  double score = 0.0;  // softmax probability of the label
};

// Argmax over classes and background of the scaled dot product; equal logits
// resolve to the lexicographically smallest name.
inline Classification classify_region(const Eigen::RowVectorXd& r, const ClassifierHead& head) {
  const Eigen::RowVectorXd logit = head.logits(r, true);
  std::vector<std::string> names = head.classes();
  names.push_back(kBackground);
  int best = 0;
  for (int i = 1; i < logit.size(); ++i) {
    if (logit(i) > logit(best) || (logit(i) == logit(best) && names[i] < names[best])) best = i;
  }
  const double mx = logit.maxCoeff();
  const double z = (logit.array() - mx).exp().sum();
  return {names[best], std::exp(logit(best) - mx) / z};
}

class StudentDetector {
 public:
  StudentDetector(const DetectorConfig& cfg, nn::ParameterStore& store, std::uint64_t seed,
                  const std::string& prefix = "student.")
      : cfg_(cfg), prefix_(prefix) {
    cfg_.validate();
    const int f = raw_feature_dim(cfg_), h = cfg_.hidden_dim, d = cfg_.embed_dim;
    w1_ = &store.add(prefix + "trunk.w", nn::init_linear(seed, prefix + "trunk.w", f, h));
    b1_ = &store.add(prefix + "trunk.b", Matrix::Zero(1, h));
    w2_ = &store.add(prefix + "proj.w", nn::init_linear(seed, prefix + "proj.w", h, d));
    b2_ = &store.add(prefix + "proj.b", Matrix::Zero(1, d));
    wo_ = &store.add(prefix + "objectness.w", nn::init_normal(seed, prefix + "objectness.w", h, 1, 0.01));
    bo_ = &store.add(prefix + "objectness.b", Matrix::Zero(1, 1));
    wr_ = &store.add(prefix + "regress.w", nn::init_normal(seed, prefix + "regress.w", h, 4, 0.01));
    br_ = &store.add(prefix + "regress.b", Matrix::Zero(1, 4));
    bg_ = &store.add(prefix + "background", nn::init_normal(seed, prefix + "background", 1, d, 1.0));
  }

  const DetectorConfig& config() const { return cfg_; }
  ag::Parameter* background() const { return bg_; }

  const std::vector<Box>& anchors(int height, int width) const {
    if (anchor_h_ != height || anchor_w_ != width) {
      anchors_ = make_anchor_grid(cfg_, height, width);
      anchor_h_ = height;
      anchor_w_ = width;
    }
    return anchors_;
  }

  Matrix pool(const FeatureMap& fm, const std::vector<Box>& boxes) const {
    Matrix x(static_cast<Eigen::Index>(boxes.size()), raw_feature_dim(cfg_));
    for (std::size_t i = 0; i < boxes.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = pool_box(fm, boxes[i], cfg_.grid);
    return x;
  }

  // Trunk and heads on the tape for an n x F raw feature matrix.
  RegionOutputs forward(ag::Tape& tape, const Matrix& raw) const {
    Var x = tape.constant(raw);
    Var h = ag::relu(ag::add_row(ag::matmul(x, tape.parameter(*w1_)), tape.parameter(*b1_)));
    RegionOutputs out;
    out.features = ag::l2_normalize_rows(ag::add_row(ag::matmul(h, tape.parameter(*w2_)), tape.parameter(*b2_)));
    out.objectness = ag::add_row(ag::matmul(h, tape.parameter(*wo_)), tape.parameter(*bo_));
    out.deltas = ag::add_row(ag::matmul(h, tape.parameter(*wr_)), tape.parameter(*br_));
    return out;
  }

  // Whole image as one extra region (r_g), through the same trunk and projection.
  Var global_region(ag::Tape& tape, const FeatureMap& fm) const {
    const Box whole{0, 0, double(fm.width()), double(fm.height())};
    return forward(tape, pool(fm, {whole})).features;
  }

  // Objectness logits of every anchor, off-tape.
  Eigen::VectorXd score_anchors(const Matrix& raw) const {
    const Matrix h = ((raw * w1_->value).rowwise() + b1_->value.row(0)).cwiseMax(0.0);
    return (h * wo_->value).col(0).array() + bo_->value(0, 0);
  }

  // Indices of the top-n anchors by objectness; ties keep the lower index.
  std::vector<int> top_anchors(const Eigen::VectorXd& scores, int n) const {
    std::vector<int> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), 0);
    n = std::min<int>(n, static_cast<int>(order.size()));
    std::partial_sort(order.begin(), order.begin() + n, order.end(),
                      [&](int a, int b) { return scores(a) > scores(b) || (scores(a) == scores(b) && a < b); });
    order.resize(static_cast<std::size_t>(n));
    return order;
  }

  // Exactly n proposals, objectness non-increasing.
  std::vector<RegionProposal> propose_regions(const FeatureMap& fm, int n) const {
    const auto& anc = anchors(fm.height(), fm.width());
    const Matrix raw = pool(fm, anc);
    const Eigen::VectorXd scores = score_anchors(raw);
    const auto top = top_anchors(scores, n);
    Matrix sel(static_cast<Eigen::Index>(top.size()), raw.cols());
    for (std::size_t i = 0; i < top.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = raw.row(top[i]);
    ag::Tape tape;
    const RegionOutputs out = forward(tape, sel);
    std::vector<RegionProposal> props;
    for (std::size_t i = 0; i < top.size(); ++i) {
      RegionProposal p;
      p.box = anc[top[i]];
      p.anchor_index = top[i];
      p.feature = out.features.value().row(static_cast<Eigen::Index>(i));
      p.objectness = 1.0 / (1.0 + std::exp(-out.objectness.value()(static_cast<Eigen::Index>(i), 0)));
      for (int k = 0; k < 4; ++k) p.delta[k] = out.deltas.value()(static_cast<Eigen::Index>(i), k);
      props.push_back(std::move(p));
    }
    return props;
  }
  std::vector<RegionProposal> propose_regions(const Image& img, int n) const {
    return propose_regions(FeatureMap(img), n);
  }

 private:
  DetectorConfig cfg_;
  std::string prefix_;
  ag::Parameter *w1_, *b1_, *w2_, *b2_, *wo_, *bo_, *wr_, *br_, *bg_;
  mutable std::vector<Box> anchors_;
  mutable int anchor_h_ = -1, anchor_w_ = -1;
};

// ---------------------------------------------------------------------------
// Detection loss

// Per-proposal assignment: class index of the matched ground truth,
// `background` for IoU below the negative threshold, -1 (ignored) between.
struct ProposalMatch {
  int label = -1;
  int gt_index = -1;
  double iou = 0.0;
  bool objectness_positive = false;
};

inline std::vector<ProposalMatch> match_proposals(const std::vector<Box>& proposals, const std::vector<Box>& gt_boxes,
                                                  const std::vector<int>& gt_labels, int background,
                                                  double positive_iou = 0.5, double negative_iou = 0.3) {
  std::vector<ProposalMatch> out(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    ProposalMatch& m = out[i];
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(proposals[i], gt_boxes[g]);
      if (v > m.iou) {
        m.iou = v;
        m.gt_index = static_cast<int>(g);
      }
    }
    m.objectness_positive = m.iou >= positive_iou;
    if (m.iou >= positive_iou) {
      m.label = gt_labels[m.gt_index];
    } else if (m.iou < negative_iou) {
      m.label = background;
      m.gt_index = -1;
    } else {
      m.label = -1;
    }
  }
  return out;
}

struct DetectionLoss {
  Var cls, reg, rpn, total;
};

// L_cls + L_reg + L_rpn. class_logits has one column per training class plus
// the background column last.
inline DetectionLoss detection_loss(ag::Tape& tape, const std::vector<Box>& proposals, const Var& class_logits,
                                    const Var& deltas, const Var& objectness_logits, const std::vector<Box>& gt_boxes,
                                    const std::vector<int>& gt_labels, const DetectorConfig& cfg = {}) {
  const int background = static_cast<int>(class_logits.cols()) - 1;
  const auto matches = match_proposals(proposals, gt_boxes, gt_labels, background, cfg.positive_iou, cfg.negative_iou);

  std::vector<int> cls_rows, cls_targets, pos_rows;
  Matrix objectness_target(static_cast<Eigen::Index>(proposals.size()), 1);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    objectness_target(static_cast<Eigen::Index>(i), 0) = matches[i].objectness_positive ? 1.0 : 0.0;
    if (matches[i].label >= 0) {
      cls_rows.push_back(static_cast<int>(i));
      cls_targets.push_back(matches[i].label);
    }
    if (matches[i].label >= 0 && matches[i].label != background) pos_rows.push_back(static_cast<int>(i));
  }

  DetectionLoss out;
  out.cls = cls_rows.empty() ? tape.constant(Matrix::Zero(1, 1))
                             : ag::cross_entropy(ag::gather_rows(class_logits, cls_rows), cls_targets);
  if (pos_rows.empty()) {
    out.reg = tape.constant(Matrix::Zero(1, 1));
  } else {
    Matrix targets(static_cast<Eigen::Index>(pos_rows.size()), 4);
    for (std::size_t k = 0; k < pos_rows.size(); ++k) {
      const auto& m = matches[pos_rows[k]];
      const auto t = encode_box_delta(proposals[pos_rows[k]], gt_boxes[m.gt_index]);
      for (int c = 0; c < 4; ++c) targets(static_cast<Eigen::Index>(k), c) = t[c];
    }
    Var diff = ag::sub(ag::gather_rows(deltas, pos_rows), tape.constant(targets));
    out.reg = ag::scale(ag::sum(ag::smooth_l1(diff, cfg.smooth_l1_beta)), 1.0 / double(pos_rows.size()));
  }
  out.rpn = ag::bce_with_logits(objectness_logits, objectness_target);
  out.total = ag::add(ag::add(out.cls, out.reg), out.rpn);
  return out;
}

// Mean over concepts of the cross-entropy of the global region's logits over
// the scoring vocabulary (no background column).
inline Var image_pseudo_loss(ag::Tape& tape, const Var& global_region, const std::vector<std::string>& concepts,
                             const ClassifierHead& head) {
  if (concepts.empty()) throw DegenerateInput("image_pseudo_loss needs at least one concept");
  std::vector<int> targets;
  for (const auto& c : concepts) targets.push_back(head.index_of(c));
  Var logits = head.logits(tape, global_region, false);
  Var rows = ag::gather_rows(logits, std::vector<int>(targets.size(), 0));
  return ag::cross_entropy(rows, targets);
}

}  // namespace mmcdet
