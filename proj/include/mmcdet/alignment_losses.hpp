#pragma once

// Region-text alignment objectives: similarity-weighted grounding and the
// bidirectional caption contrastive loss, attention-weighted grounding and
// the distillation contrastive loss, and stage-dependent loss assembly.

#include <map>
#include <string>
#include <vector>

#include "mmcdet/autograd.hpp"
#include "mmcdet/error.hpp"

namespace mmcdet {

// (1/n_T) sum_i sum_j a_ij <w_i, r_j>, a_i = softmax_j <w_i, r_j>.
inline ag::Var grounding_score_S(const ag::Var& tokens, const ag::Var& regions) {
  if (regions.rows() == 0) throw DegenerateInput("grounding score needs at least one region");
  if (tokens.rows() == 0) throw DegenerateInput("grounding score needs at least one token");
  ag::Var sims = ag::matmul_nt(tokens, regions);
  ag::Var a = ag::softmax_rows(sims);
  return ag::scale(ag::sum(ag::mul(a, sims)), 1.0 / static_cast<double>(tokens.rows()));
}

// (1/m) sum_i sum_{j in P} A_ij <c_i, r_j>, regions given in the column order of A.
inline ag::Var grounding_score_A(const ag::Var& concepts, const ag::Var& regions, const ag::Var& attention) {
  if (concepts.rows() == 0) throw DegenerateInput("attention grounding needs at least one concept");
  if (attention.rows() != concepts.rows() || attention.cols() != regions.rows()) {
    throw ConfigError("attention record does not match concepts and regions");
  }
  return ag::scale(ag::sum(ag::mul(attention, ag::matmul_nt(concepts, regions))),
                   1.0 / static_cast<double>(concepts.rows()));
}

// scores(i, j) = score of image i against caption j. Returns the batch mean of
// L_con(I,T) + L_con(T,I).
inline ag::Var contrastive_loss_from_scores(const ag::Var& scores) {
  const auto b = scores.rows();
  if (b == 0 || scores.cols() != b) throw DegenerateInput("contrastive loss needs a square, nonempty score matrix");
  std::vector<int> diag(static_cast<std::size_t>(b));
  for (int i = 0; i < static_cast<int>(b); ++i) diag[static_cast<std::size_t>(i)] = i;
  ag::Var image_to_text = ag::sum(ag::pick(ag::log_softmax_rows(scores), diag));
  ag::Var text_to_image = ag::sum(ag::pick(ag::log_softmax_rows(ag::transpose(scores)), diag));
  return ag::scale(ag::add(image_to_text, text_to_image), -1.0 / static_cast<double>(b));
}

inline ag::Var score_matrix(const std::vector<std::vector<ag::Var>>& cells) {
  std::vector<ag::Var> rows;
  for (const auto& r : cells) rows.push_back(ag::concat_cols(r));
  return ag::concat_rows(rows);
}

// L_cap over a batch: words[j] are the word embeddings of caption j, regions[i]
// the proposal features of image i.
inline ag::Var contrastive_caption_loss(const std::vector<ag::Var>& words, const std::vector<ag::Var>& regions) {
  if (words.empty() || words.size() != regions.size()) throw DegenerateInput("caption batch must be paired and nonempty");
  std::vector<std::vector<ag::Var>> cells(regions.size());
  for (std::size_t i = 0; i < regions.size(); ++i) {
    for (std::size_t j = 0; j < words.size(); ++j) cells[i].push_back(grounding_score_S(words[j], regions[i]));
  }
  return contrastive_loss_from_scores(score_matrix(cells));
}

// One image-caption pair of a distillation batch.
struct DistillPair {
  ag::Var concepts;       // m x d concept embeddings of the caption (all concepts)
  ag::Var regions;        // n x d proposal features R^I
  ag::Var filtered;       // |P| x d features of P in union order
  ag::Var attention;      // m x |P| attention record
  std::vector<bool> noise;  // per concept; empty means none flagged
};

struct DistillOptions {
  bool remove_noise = true;
  bool attention_positive_in_denominator = false;  // score the positive term with A instead of S
};

// L_con^A(I,T) + L_con^A(T,I) averaged over the pairs that keep at least one concept.
inline ag::Var distill_loss(ag::Tape& tape, const std::vector<DistillPair>& batch, const DistillOptions& opt = {}) {
  std::vector<ag::Var> concepts, attention;
  std::vector<int> valid;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    std::vector<int> keep;
    for (int c = 0; c < static_cast<int>(p.concepts.rows()); ++c) {
      const bool flagged = opt.remove_noise && !p.noise.empty() && p.noise[static_cast<std::size_t>(c)];
      if (!flagged) keep.push_back(c);
    }
    if (keep.empty()) continue;
    valid.push_back(static_cast<int>(i));
    const bool all = keep.size() == static_cast<std::size_t>(p.concepts.rows());
    concepts.push_back(all ? p.concepts : ag::gather_rows(p.concepts, keep));
    attention.push_back(all ? p.attention : ag::gather_rows(p.attention, keep));
  }
  if (valid.empty()) return tape.constant(ag::Matrix::Zero(1, 1));

  const std::size_t b = valid.size();
  std::vector<ag::Var> positive;
  std::vector<std::vector<ag::Var>> cells(b);  // cells[i][j]: image i vs caption j, S-scored
  for (std::size_t i = 0; i < b; ++i) {
    const auto& pair = batch[static_cast<std::size_t>(valid[i])];
    positive.push_back(grounding_score_A(concepts[i], pair.filtered, attention[i]));
    for (std::size_t j = 0; j < b; ++j) {
      cells[i].push_back(opt.attention_positive_in_denominator && i == j ? positive[i]
                                                                        : grounding_score_S(concepts[j], pair.regions));
    }
  }
  ag::Var total = tape.constant(ag::Matrix::Zero(1, 1));
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<ag::Var> col;
    for (std::size_t k = 0; k < b; ++k) col.push_back(cells[k][i]);
    ag::Var lse_row = ag::log(ag::sum(ag::exp(ag::concat_cols(cells[i]))));
    ag::Var lse_col = ag::log(ag::sum(ag::exp(ag::concat_cols(col))));
    total = ag::add(total, ag::sub(ag::add(lse_row, lse_col), ag::scale(positive[i], 2.0)));
  }
  return ag::scale(total, 1.0 / static_cast<double>(b));
}

// ---------------------------------------------------------------------------
// Loss assembly

enum class Stage { baseline, stage1, stage2 };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::baseline: return "baseline";
    case Stage::stage1: return "stage1";
    case Stage::stage2: return "stage2";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "baseline") return Stage::baseline;
  if (s == "1" || s == "stage1") return Stage::stage1;
  if (s == "2" || s == "stage2") return Stage::stage2;
  throw ConfigError("unknown stage '" + s + "'");
}

inline const std::vector<std::string>& loss_names() {
  static const std::vector<std::string> names = {"det", "cap", "img", "divmlm", "distill"};
  return names;
}

struct LossWeights {
  std::map<std::string, double> w = {{"det", 1.0}, {"cap", 0.1}, {"img", 0.1}, {"divmlm", 0.1}, {"distill", 0.1}};

  double operator[](const std::string& name) const {
    const auto it = w.find(name);
    if (it == w.end()) throw ConfigError("unknown loss '" + name + "'");
    return it->second;
  }
};

inline std::vector<std::string> stage_components(Stage s) {
  switch (s) {
    case Stage::baseline: return {"det", "cap", "img"};
    case Stage::stage1: return {"det", "cap", "img", "divmlm"};
    case Stage::stage2: return {"det", "cap", "img", "divmlm", "distill"};
  }
  return {};
}

// Named scalar losses of one step and their weighted total.
struct LossBundle {
  std::map<std::string, double> values;
  double total = 0.0;
};

inline LossBundle assemble_losses(Stage stage, const std::map<std::string, double>& components,
                                  const LossWeights& weights = {}) {
  LossBundle out;
  for (const auto& name : stage_components(stage)) {
    const auto it = components.find(name);
    if (it == components.end()) throw ConfigError(std::string("missing loss component '") + name + "' for " + stage_name(stage));
    out.values[name] = it->second;
    if (weights[name] != 0.0) out.total += weights[name] * it->second;
  }
  return out;
}

// Weighted sum on the tape of the components a step produced; zero-weight
// components are left out of the graph entirely.
inline ag::Var weighted_total(ag::Tape& tape, const std::map<std::string, ag::Var>& components,
                              const LossWeights& weights) {
  ag::Var total = tape.constant(ag::Matrix::Zero(1, 1));
  for (const auto& [name, v] : components) {
    const double w = weights[name];
    if (w != 0.0) total = ag::add(total, ag::scale(v, w));
  }
  return total;
}

}  // namespace mmcdet
