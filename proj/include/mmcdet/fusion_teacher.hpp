#pragma once

// Teacher: per-concept proposal pre-filtering, a pre-LN transformer over
// masked caption tokens and region tokens, the attention record of each
// masked concept over the regions, and the MLM / divergence losses.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmcdet/autograd.hpp"
#include "mmcdet/caption_grammar.hpp"
#include "mmcdet/geometry.hpp"
#include "mmcdet/nn.hpp"

namespace mmcdet {

struct FusionConfig {
  int layers = 2;
  int heads = 4;
  int model_dim = 32;
  int feedforward_dim = 64;
  int top_k = 4;
  double divergence_alpha = 0.5;
  int divergence_layer = -1;         // -1 selects the last layer
  double divergence_exponent = 1.0;  // margin normaliser is |C^T|^exponent
  bool divergence_enabled = true;    // false gives vanilla MLM

  int record_layer() const { return divergence_layer < 0 ? layers - 1 : divergence_layer; }

  void validate() const {
    if (layers <= 0 || heads <= 0 || model_dim <= 0 || feedforward_dim <= 0) {
      throw ConfigError("fusion dimensions must be positive");
    }
    if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
    if (divergence_alpha <= 0) throw ConfigError("divergence_alpha must be positive");
    if (record_layer() < 0 || record_layer() >= layers) throw ConfigError("divergence_layer out of range");
    if (top_k <= 0) throw ConfigError("top_k must be positive");
  }
};

// P^(c_i) for every concept and their concatenation P.
struct FilteredProposals {
  std::vector<std::vector<int>> per_concept;
  std::vector<int> union_order;  // proposal index of every column of P
  std::vector<int> block;        // concept owning every column of P

  std::size_t size() const { return union_order.size(); }
};

// Top-K proposals per concept by <r_j, c_i>; equal similarities keep the lower
// index. Each list is returned in ascending proposal order.
inline FilteredProposals prefilter_proposals(const Eigen::MatrixXd& concept_embeddings,
                                             const Eigen::MatrixXd& regions, int k) {
  if (k <= 0) throw ConfigError("prefilter K must be positive");
  if (regions.rows() == 0) throw DegenerateInput("prefilter needs at least one proposal");
  const int n = static_cast<int>(regions.rows());
  FilteredProposals out;
  const Eigen::MatrixXd sims = concept_embeddings * regions.transpose();
  for (Eigen::Index c = 0; c < sims.rows(); ++c) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    if (k < n) {
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return sims(c, a) > sims(c, b); });
      idx.resize(static_cast<std::size_t>(k));
      std::sort(idx.begin(), idx.end());
    }
    for (int j : idx) {
      out.union_order.push_back(j);
      out.block.push_back(static_cast<int>(c));
    }
    out.per_concept.push_back(std::move(idx));
  }
  return out;
}

// Sinusoidal position code, n x d.
inline Eigen::MatrixXd sinusoidal_positions(int n, int d) {
  Eigen::MatrixXd p(n, d);
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / d);
      p(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return p;
}

struct FusionOutput {
  ag::Var mask_logits;  // views x V
  ag::Var attention;    // views x |P|, rows sum to 1
  int layer = 0;
  bool head_averaged = true;
};

class FusionTeacher {
 public:
  FusionTeacher(const FusionConfig& cfg, const Vocabulary& vocab, nn::ParameterStore& store, std::uint64_t seed,
                const std::string& prefix = "teacher.")
      : cfg_(cfg), vocab_(&vocab) {
    cfg_.validate();
    if (vocab.embedding_dim() != cfg_.model_dim) throw ConfigError("vocabulary and teacher dimensions differ");
    const int d = cfg_.model_dim, f = cfg_.feedforward_dim, v = vocab.size();
    auto add = [&](const std::string& name, ag::Matrix m) { return &store.add(prefix + name, std::move(m)); };
    auto lin = [&](const std::string& name, int in, int out) {
      return add(name, nn::init_linear(seed, prefix + name, in, out));
    };
    text_type_ = add("text_type", nn::init_normal(seed, prefix + "text_type", 1, d, 0.1));
    region_type_ = add("region_type", nn::init_normal(seed, prefix + "region_type", 1, d, 0.1));
    geometry_ = add("region_geometry", nn::init_normal(seed, prefix + "region_geometry", 4, d, 0.1));
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L;
      L.ln1_g = add(p + "ln1.gain", ag::Matrix::Ones(1, d));
      L.ln1_b = add(p + "ln1.bias", ag::Matrix::Zero(1, d));
      L.wq = lin(p + "attn.q", d, d);
      L.wk = lin(p + "attn.k", d, d);
      L.wv = lin(p + "attn.v", d, d);
      L.wo = lin(p + "attn.out", d, d);
      L.bo = add(p + "attn.out_bias", ag::Matrix::Zero(1, d));
      L.ln2_g = add(p + "ln2.gain", ag::Matrix::Ones(1, d));
      L.ln2_b = add(p + "ln2.bias", ag::Matrix::Zero(1, d));
      L.w1 = lin(p + "ff.in", d, f);
      L.b1 = add(p + "ff.in_bias", ag::Matrix::Zero(1, f));
      L.w2 = lin(p + "ff.out", f, d);
      L.b2 = add(p + "ff.out_bias", ag::Matrix::Zero(1, d));
      layers_.push_back(L);
    }
    lnf_g_ = add("final_ln.gain", ag::Matrix::Ones(1, d));
    lnf_b_ = add("final_ln.bias", ag::Matrix::Zero(1, d));
    head_w_ = lin("mlm.w", d, v);
    head_b_ = add("mlm.b", ag::Matrix::Zero(1, v));
  }

  const FusionConfig& config() const { return cfg_; }
  const Vocabulary& vocabulary() const { return *vocab_; }

  // One sequence [Q | P] per view. `regions` holds the region features of P in
  // union order; `boxes` are their boxes in an image of the given size.
  FusionOutput forward(ag::Tape& tape, const std::vector<MaskedView>& views, const ag::Var& regions,
                       const std::vector<Box>& boxes, int image_width, int image_height) const {
    if (views.empty()) throw DegenerateInput("forward_fusion needs at least one masked view");
    if (regions.cols() != cfg_.model_dim) throw ConfigError("region feature dimension differs from model_dim");
    if (regions.rows() == 0) throw DegenerateInput("forward_fusion needs at least one region");
    if (static_cast<Eigen::Index>(boxes.size()) != regions.rows()) throw ConfigError("one box per region required");

    ag::Matrix geom(regions.rows(), 4);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      geom.row(static_cast<Eigen::Index>(i)) << boxes[i].x1 / image_width, boxes[i].y1 / image_height,
          boxes[i].x2 / image_width, boxes[i].y2 / image_height;
    }
    ag::Var region_tokens = ag::add_row(
        ag::add(regions, ag::matmul(tape.constant(geom), tape.parameter(*geometry_))), tape.parameter(*region_type_));

    std::vector<ag::Var> logits, rows;
    for (const auto& view : views) {
      const int n_text = static_cast<int>(view.token_ids.size());
      ag::Matrix text = embed_tokens(view.token_ids, *vocab_) + sinusoidal_positions(n_text, cfg_.model_dim);
      ag::Var text_tokens = ag::add_row(tape.constant(std::move(text)), tape.parameter(*text_type_));
      ag::Var x = ag::concat_rows({text_tokens, region_tokens});
      ag::Var record;
      for (int l = 0; l < cfg_.layers; ++l) {
        const bool keep = l == cfg_.record_layer();
        x = block(tape, layers_[l], x, keep ? &record : nullptr, view.masked_position, n_text,
                  static_cast<int>(regions.rows()));
      }
      ag::Var h = ag::layer_norm_rows(ag::slice_rows(x, view.masked_position, 1), tape.parameter(*lnf_g_),
                                      tape.parameter(*lnf_b_));
      logits.push_back(ag::add_row(ag::matmul(h, tape.parameter(*head_w_)), tape.parameter(*head_b_)));
      rows.push_back(record);
    }
    FusionOutput out;
    out.mask_logits = ag::concat_rows(logits);
    out.attention = ag::concat_rows(rows);
    out.layer = cfg_.record_layer();
    return out;
  }

 private:
  struct Layer {
    ag::Parameter *ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *bo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };

  ag::Var block(ag::Tape& tape, const Layer& L, const ag::Var& x, ag::Var* record, int query, int n_text,
                int n_region) const {
    const int dh = cfg_.model_dim / cfg_.heads;
    ag::Var xn = ag::layer_norm_rows(x, tape.parameter(*L.ln1_g), tape.parameter(*L.ln1_b));
    ag::Var q = ag::matmul(xn, tape.parameter(*L.wq));
    ag::Var k = ag::matmul(xn, tape.parameter(*L.wk));
    ag::Var v = ag::matmul(xn, tape.parameter(*L.wv));
    std::vector<ag::Var> heads, attn_rows;
    for (int h = 0; h < cfg_.heads; ++h) {
      ag::Var qh = ag::slice_cols(q, h * dh, dh), kh = ag::slice_cols(k, h * dh, dh), vh = ag::slice_cols(v, h * dh, dh);
      ag::Var a = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
      if (record) attn_rows.push_back(ag::slice_cols(ag::slice_rows(a, query, 1), n_text, n_region));
      heads.push_back(ag::matmul(a, vh));
    }
    if (record) {
      ag::Var avg = attn_rows[0];
      for (std::size_t h = 1; h < attn_rows.size(); ++h) avg = ag::add(avg, attn_rows[h]);
      *record = ag::normalize_rows_sum(ag::scale(avg, 1.0 / cfg_.heads));
    }
    ag::Var attn = ag::add_row(ag::matmul(ag::concat_cols(heads), tape.parameter(*L.wo)), tape.parameter(*L.bo));
    ag::Var y = ag::add(x, attn);
    ag::Var yn = ag::layer_norm_rows(y, tape.parameter(*L.ln2_g), tape.parameter(*L.ln2_b));
    ag::Var ff = ag::relu(ag::add_row(ag::matmul(yn, tape.parameter(*L.w1)), tape.parameter(*L.b1)));
    ff = ag::add_row(ag::matmul(ff, tape.parameter(*L.w2)), tape.parameter(*L.b2));
    return ag::add(y, ff);
  }

  FusionConfig cfg_;
  const Vocabulary* vocab_;
  ag::Parameter *text_type_, *region_type_, *geometry_;
  std::vector<Layer> layers_;
  ag::Parameter *lnf_g_, *lnf_b_, *head_w_, *head_b_;
};

inline ag::Var mlm_loss(const ag::Var& mask_logits, const std::vector<int>& targets) {
  return ag::cross_entropy(mask_logits, targets);
}

// Coefficients W with margin = sum(A .* W) / m^exponent:
// W(j,k) = m [k in block j] - 1, every column of P belonging to exactly one block.
inline Eigen::MatrixXd divergence_weights(const FilteredProposals& filtered) {
  const auto m = static_cast<Eigen::Index>(filtered.per_concept.size());
  const auto n = static_cast<Eigen::Index>(filtered.size());
  Eigen::MatrixXd w = Eigen::MatrixXd::Constant(m, n, -1.0);
  for (Eigen::Index k = 0; k < n; ++k) w(filtered.block[k], k) += static_cast<double>(m);
  return w;
}

// [alpha - margin]_+ with margin the mean exclusive-proposal attention gap.
inline ag::Var divergence_loss(const ag::Var& attention, const FilteredProposals& filtered, double alpha,
                               double exponent = 1.0) {
  const auto m = static_cast<double>(filtered.per_concept.size());
  if (attention.rows() != static_cast<Eigen::Index>(filtered.per_concept.size()) ||
      attention.cols() != static_cast<Eigen::Index>(filtered.size())) {
    throw ConfigError("attention record does not match the filtered proposals");
  }
  ag::Tape& tape = *attention.tape();
  ag::Var margin = ag::scale(ag::sum(ag::mul(attention, tape.constant(divergence_weights(filtered)))),
                             1.0 / std::pow(m, exponent));
  return ag::relu(ag::add_scalar(ag::scale(margin, -1.0), alpha));
}

inline ag::Var dmlm_loss(const ag::Var& attention, const FilteredProposals& filtered, const ag::Var& mask_logits,
                         const std::vector<int>& targets, const FusionConfig& cfg) {
  ag::Var mlm = mlm_loss(mask_logits, targets);
  if (!cfg.divergence_enabled) return mlm;
  return ag::add(divergence_loss(attention, filtered, cfg.divergence_alpha, cfg.divergence_exponent), mlm);
}

struct MaskedPrediction {
  TokenId predicted = -1;
  bool is_noise = false;
};

// Argmax word per view (ties to the lower id); a concept is noise when the
// prediction disagrees with it.
inline std::vector<MaskedPrediction> predict_masked_and_flag_noise(const Eigen::MatrixXd& mask_logits,
                                                                   const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != mask_logits.rows()) throw ConfigError("one target per view");
  std::vector<MaskedPrediction> out;
  for (Eigen::Index i = 0; i < mask_logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < mask_logits.cols(); ++j) {
      if (mask_logits(i, j) > mask_logits(i, best)) best = j;
    }
    out.push_back({static_cast<TokenId>(best), best != targets[static_cast<std::size_t>(i)]});
  }
  return out;
}

}  // namespace mmcdet
