#pragma once

// Detection metrics, attention diagnostics and plot-table emission.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcdet/error.hpp"
#include "mmcdet/geometry.hpp"
#include "mmcdet/synth_world.hpp"

namespace mmcdet {

struct Detection {
  Box box;
  std::string label;
  double confidence = 0.0;
};

// Detections of one image, after NMS.
using DetectionResult = std::vector<Detection>;

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<std::string> labels;
};

struct PrPoint {
  double precision = 0.0, recall = 0.0;
};

struct ClassAp {
  double ap = 0.0;
  int num_gt = 0;
  std::vector<PrPoint> curve;
};

// All-point interpolated AP at IoU 0.5 for one class. Detections are visited by
// descending confidence (stable across images and within an image); each takes
// the best still-unmatched ground truth with IoU >= 0.5.
inline ClassAp average_precision(const std::vector<DetectionResult>& results, const std::vector<GroundTruth>& truth,
                                 const std::string& label, double iou_threshold = 0.5) {
  if (results.size() != truth.size()) throw ConfigError("one detection list per ground-truth image required");
  struct Cand {
    double conf;
    std::size_t image;
    Box box;
  };
  std::vector<Cand> cands;
  std::vector<std::vector<int>> gt(truth.size());
  ClassAp out;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t g = 0; g < truth[i].boxes.size(); ++g) {
      if (truth[i].labels[g] == label) gt[i].push_back(static_cast<int>(g));
    }
    out.num_gt += static_cast<int>(gt[i].size());
    for (const auto& d : results[i]) {
      if (d.label == label) cands.push_back({d.confidence, i, d.box});
    }
  }
  if (out.num_gt == 0) return out;
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.conf > b.conf; });

  std::vector<std::vector<char>> used(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) used[i].assign(gt[i].size(), 0);
  int tp = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const auto& c = cands[k];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gt[c.image].size(); ++g) {
      if (used[c.image][g]) continue;
      const double v = iou(c.box, truth[c.image].boxes[gt[c.image][g]]);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[c.image][best] = 1;
      ++tp;
    }
    out.curve.push_back({double(tp) / double(k + 1), double(tp) / out.num_gt});
  }
  double envelope = 0.0, prev_recall = 0.0;
  std::vector<double> interp(out.curve.size());
  for (std::size_t k = out.curve.size(); k-- > 0;) {
    envelope = std::max(envelope, out.curve[k].precision);
    interp[k] = envelope;
  }
  for (std::size_t k = 0; k < out.curve.size(); ++k) {
    out.ap += (out.curve[k].recall - prev_recall) * interp[k];
    prev_recall = out.curve[k].recall;
  }
  return out;
}

struct Ap50Report {
  double novel = 0.0, base = 0.0, all = 0.0;
  std::map<std::string, ClassAp> per_class;
};

// Group scores are means over the classes of the group that have ground truth.
inline Ap50Report compute_ap50(const std::vector<DetectionResult>& results, const std::vector<GroundTruth>& truth,
                               const ClassSplit& split) {
  Ap50Report rep;
  auto group = [&](const std::vector<std::string>& classes) {
    double s = 0.0;
    int n = 0;
    for (const auto& c : classes) {
      auto it = rep.per_class.find(c);
      if (it == rep.per_class.end()) it = rep.per_class.emplace(c, average_precision(results, truth, c)).first;
      if (it->second.num_gt > 0) {
        s += it->second.ap;
        ++n;
      }
    }
    return n > 0 ? s / n : 0.0;
  };
  rep.base = group(split.base);
  rep.novel = group(split.novel);
  rep.all = group(split.all());
  return rep;
}

// Total-variation distance between two distributions.
inline double total_variation(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  return 0.5 * (a - b).cwiseAbs().sum();
}

// Mean pairwise TV between the rows of one attention record.
inline double pairwise_tv(const Eigen::MatrixXd& rows) {
  double s = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < rows.rows(); ++j) {
      s += total_variation(rows.row(i), rows.row(j));
      ++n;
    }
  }
  return n > 0 ? s / n : 0.0;
}

// Corpus mean of pairwise_tv over records with at least two concepts.
inline double attention_diversity(const std::vector<Eigen::MatrixXd>& records) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : records) {
    if (r.rows() < 2) continue;
    s += pairwise_tv(r);
    ++n;
  }
  return n > 0 ? s / n : 0.0;
}

struct EvalReport {
  double ap50_novel = 0.0, ap50_base = 0.0, ap50_all = 0.0;
  double mlm_accuracy = 0.0;
  double attention_tv = 0.0;
  std::map<std::string, double> per_class_ap;

  nlohmann::json to_json() const {
    return {{"ap50_novel", ap50_novel},     {"ap50_base", ap50_base},       {"ap50_all", ap50_all},
            {"mlm_accuracy", mlm_accuracy}, {"attention_tv", attention_tv}, {"per_class_ap", per_class_ap}};
  }
};

// Attention rows of one caption, with the boxes of P, for plotting.
struct AttentionDump {
  int caption_id = 0;
  std::vector<std::string> concepts;  // one per row
  std::vector<Box> boxes;             // one per column
  Eigen::MatrixXd scores;
};

inline std::ofstream open_for_write(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IOError("cannot write " + p.string());
  return out;
}

// Tab-separated tables in `dir`: attention.tsv (one row per caption, concept
// and proposal), pr_curves.tsv, report.json.
inline void emit_plot_data(const EvalReport& report, const Ap50Report& ap, const std::vector<AttentionDump>& records,
                           const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IOError("cannot create " + dir.string() + ": " + ec.message());
  {
    auto out = open_for_write(dir / "attention.tsv");
    out << "caption_id\tconcept_index\tconcept\tproposal\tx1\ty1\tx2\ty2\tscore\n";
    for (const auto& r : records) {
      for (Eigen::Index i = 0; i < r.scores.rows(); ++i) {
        for (Eigen::Index j = 0; j < r.scores.cols(); ++j) {
          const Box& b = r.boxes[static_cast<std::size_t>(j)];
          out << r.caption_id << '\t' << i << '\t' << r.concepts[static_cast<std::size_t>(i)] << '\t' << j << '\t'
              << b.x1 << '\t' << b.y1 << '\t' << b.x2 << '\t' << b.y2 << '\t' << r.scores(i, j) << '\n';
        }
      }
    }
  }
  {
    auto out = open_for_write(dir / "pr_curves.tsv");
    out << "class\trank\tprecision\trecall\n";
    for (const auto& [cls, c] : ap.per_class) {
      for (std::size_t k = 0; k < c.curve.size(); ++k) {
        out << cls << '\t' << k << '\t' << c.curve[k].precision << '\t' << c.curve[k].recall << '\n';
      }
    }
  }
  auto out = open_for_write(dir / "report.json");
  out << report.to_json().dump(2) << '\n';
}

// Ablation bars: one row per configuration.
inline void write_results_table(const std::filesystem::path& path, const std::vector<std::string>& rows,
                                const std::vector<EvalReport>& reports) {
  auto out = open_for_write(path);
  out << "row\tap50_novel\tap50_base\tap50_all\tmlm_accuracy\tattention_tv\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = reports[i];
    out << rows[i] << '\t' << r.ap50_novel << '\t' << r.ap50_base << '\t' << r.ap50_all << '\t' << r.mlm_accuracy
        << '\t' << r.attention_tv << '\n';
  }
}

}  // namespace mmcdet
