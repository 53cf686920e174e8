#include <gtest/gtest.h>

#include <cmath>

#include "mmcdet/alignment_losses.hpp"
#include "mmcdet/rng.hpp"
#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"

using namespace mmcdet;
using ag::Matrix;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * rng.normal();
  return m;
}

Matrix random_distributions(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = std::exp(rng.normal());
  for (int i = 0; i < rows; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

double score_S(const Matrix& w, const Matrix& r) {
  ag::Tape t;
  return grounding_score_S(t.constant(w), t.constant(r)).scalar();
}

double score_A(const Matrix& c, const Matrix& r, const Matrix& a) {
  ag::Tape t;
  return grounding_score_A(t.constant(c), t.constant(r), t.constant(a)).scalar();
}

double contrastive(const Matrix& s) {
  ag::Tape t;
  return contrastive_loss_from_scores(t.constant(s)).scalar();
}

std::vector<std::vector<double>> to_rows(const Matrix& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(m(i, j));
  }
  return out;
}

// Plain data for one distillation pair.
struct PairData {
  Matrix concepts, regions, filtered, attention;
  std::vector<bool> noise;
};

PairData random_pair(Rng& rng, int m, int n, int p, int d, double noise_rate) {
  PairData x{random_matrix(rng, m, d, 0.6), random_matrix(rng, n, d, 0.6), random_matrix(rng, p, d, 0.6),
             random_distributions(rng, m, p), {}};
  for (int i = 0; i < m; ++i) x.noise.push_back(rng.uniform() < noise_rate);
  return x;
}

double distill_value(const std::vector<PairData>& pairs, const DistillOptions& opt = {}) {
  ag::Tape t;
  std::vector<DistillPair> batch;
  for (const auto& p : pairs) {
    batch.push_back({t.constant(p.concepts), t.constant(p.regions), t.constant(p.filtered), t.constant(p.attention), p.noise});
  }
  return distill_loss(t, batch, opt).scalar();
}

Matrix keep_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// Direct loop evaluation of the distillation loss with noise removal.
double distill_oracle(const std::vector<PairData>& pairs) {
  std::vector<Matrix> c, a;
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<int> keep;
    for (int k = 0; k < pairs[i].concepts.rows(); ++k) {
      if (!pairs[i].noise[static_cast<std::size_t>(k)]) keep.push_back(k);
    }
    if (keep.empty()) continue;
    valid.push_back(i);
    c.push_back(keep_rows(pairs[i].concepts, keep));
    a.push_back(keep_rows(pairs[i].attention, keep));
  }
  if (valid.empty()) return 0.0;
  std::vector<double> positive;
  std::vector<std::vector<double>> s(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    positive.push_back(oracle::grounding_A(c[i], pairs[valid[i]].filtered, a[i]));
    for (std::size_t j = 0; j < valid.size(); ++j) s[i].push_back(oracle::grounding_S(c[j], pairs[valid[i]].regions));
  }
  return oracle::distill(positive, s);
}

}  // namespace

TEST(GroundingS, Examples) {
  Matrix w(1, 2), r(1, 2);
  w << 1.0, 0.5;
  r << 0.4, -2.0;
  EXPECT_NEAR(score_S(w, r), 0.4 - 1.0, 1e-15);
  Matrix w1(1, 1), r2(2, 1);
  w1 << 1.0;
  r2 << 2.0, 0.0;
  EXPECT_NEAR(score_S(w1, r2), 2.0 * std::exp(2.0) / (std::exp(2.0) + 1.0), 1e-12);
  EXPECT_NEAR(score_S(w1, r2), 1.7616, 1e-4);
}

TEST(GroundingS, BoundedByMaxSimilarityAndMatchesOracle) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const Matrix w = random_matrix(rng, rng.uniform_int(1, 8), 5), r = random_matrix(rng, rng.uniform_int(1, 16), 5);
    const double s = score_S(w, r);
    EXPECT_LE(s, (w * r.transpose()).maxCoeff() + 1e-12);
    EXPECT_NEAR(s, oracle::grounding_S(w, r), 1e-10);
  }
}

TEST(GroundingS, EmptyInputsAreDegenerate) {
  EXPECT_THROW(score_S(Matrix::Ones(1, 3), Matrix(0, 3)), DegenerateInput);
  EXPECT_THROW(score_S(Matrix(0, 3), Matrix::Ones(1, 3)), DegenerateInput);
}

TEST(GroundingA, Examples) {
  Rng rng(2);
  const Matrix c = random_matrix(rng, 1, 4), r = random_matrix(rng, 3, 4);
  Matrix onehot = Matrix::Zero(1, 3);
  onehot(0, 2) = 1.0;
  EXPECT_NEAR(score_A(c, r, onehot), c.row(0).dot(r.row(2)), 1e-14);
  EXPECT_NEAR(score_A(c, r, Matrix::Constant(1, 3, 1.0 / 3)), (c * r.transpose()).mean(), 1e-14);
  const Matrix c2 = random_matrix(rng, 2, 4), a2 = random_distributions(rng, 2, 3);
  const double per0 = score_A(c2.row(0), r, a2.row(0)), per1 = score_A(c2.row(1), r, a2.row(1));
  EXPECT_NEAR(score_A(c2, r, a2), 0.5 * (per0 + per1), 1e-14);
  EXPECT_THROW(score_A(c2, r, onehot), ConfigError);
  EXPECT_THROW(score_A(Matrix(0, 4), r, Matrix(0, 3)), DegenerateInput);
}

TEST(GroundingA, MatchesOracle) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const int m = rng.uniform_int(1, 4), p = rng.uniform_int(1, 12);
    const Matrix c = random_matrix(rng, m, 6), r = random_matrix(rng, p, 6), a = random_distributions(rng, m, p);
    EXPECT_NEAR(score_A(c, r, a), oracle::grounding_A(c, r, a), 1e-10);
  }
}

TEST(Contrastive, Examples) {
  EXPECT_NEAR(contrastive(Matrix::Constant(1, 1, 3.7)), 0.0, 1e-15);
  Matrix s(2, 2);
  s << 2, 0, 0, 2;
  const double per = std::log1p(std::exp(-2.0));
  EXPECT_NEAR(per, 0.1269, 1e-4);
  EXPECT_NEAR(contrastive(s), 2.0 * per, 1e-12);
}

TEST(Contrastive, ShiftInvariantAndNonNegative) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const Matrix s = random_matrix(rng, 3, 3, 2.0);
    EXPECT_GE(contrastive(s), 0.0);
    EXPECT_NEAR(contrastive(s.array() + 5.0), contrastive(s), 1e-12);
  }
}

TEST(Contrastive, MatchesOracle) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const int b = rng.uniform_int(1, 6);
    const Matrix s = random_matrix(rng, b, b, 2.0);
    EXPECT_NEAR(contrastive(s), oracle::contrastive(to_rows(s)), 1e-10);
  }
  EXPECT_THROW(contrastive(Matrix::Zero(2, 3)), DegenerateInput);
}

TEST(CaptionLoss, MatchesOracleOverGroundingScores) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const int b = rng.uniform_int(1, 4);
    std::vector<Matrix> words, regions;
    for (int i = 0; i < b; ++i) {
      words.push_back(random_matrix(rng, rng.uniform_int(1, 6), 4));
      regions.push_back(random_matrix(rng, rng.uniform_int(1, 6), 4));
    }
    ag::Tape tape;
    std::vector<ag::Var> wv, rv;
    for (int i = 0; i < b; ++i) {
      wv.push_back(tape.constant(words[static_cast<std::size_t>(i)]));
      rv.push_back(tape.constant(regions[static_cast<std::size_t>(i)]));
    }
    std::vector<std::vector<double>> s(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < b; ++j) {
        s[static_cast<std::size_t>(i)].push_back(
            oracle::grounding_S(words[static_cast<std::size_t>(j)], regions[static_cast<std::size_t>(i)]));
      }
    }
    EXPECT_NEAR(contrastive_caption_loss(wv, rv).scalar(), oracle::contrastive(s), 1e-10);
  }
}

TEST(Distill, SinglePairExamples) {
  Rng rng(7);
  PairData p = random_pair(rng, 2, 4, 4, 3, 0.0);
  p.filtered = p.regions;
  const Matrix sims = p.concepts * p.regions.transpose();
  for (int i = 0; i < 2; ++i) {
    p.attention.row(i) = (sims.row(i).array() - sims.row(i).maxCoeff()).exp();
    p.attention.row(i) /= p.attention.row(i).sum();
  }
  EXPECT_NEAR(distill_value({p}), 0.0, 1e-12);

  PairData q = random_pair(rng, 2, 4, 3, 3, 0.0);
  const double a = oracle::grounding_A(q.concepts, q.filtered, q.attention), s = oracle::grounding_S(q.concepts, q.regions);
  EXPECT_NEAR(distill_value({q}), 2.0 * (s - a), 1e-12);
}

TEST(Distill, MatchesLoopOracleWithNoise) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const int b = rng.uniform_int(1, 4);
    std::vector<PairData> pairs;
    for (int i = 0; i < b; ++i) pairs.push_back(random_pair(rng, rng.uniform_int(1, 3), rng.uniform_int(1, 6), rng.uniform_int(1, 5), 4, 0.3));
    EXPECT_NEAR(distill_value(pairs), distill_oracle(pairs), 1e-10);
  }
}

TEST(Distill, CleanFlagsMakeRemovalIdentity) {
  Rng rng(9);
  std::vector<PairData> pairs;
  for (int i = 0; i < 3; ++i) pairs.push_back(random_pair(rng, 2, 5, 4, 4, 0.0));
  DistillOptions off;
  off.remove_noise = false;
  EXPECT_EQ(distill_value(pairs), distill_value(pairs, off));
}

TEST(Distill, FullyFlaggedPairsAreExcluded) {
  Rng rng(10);
  std::vector<PairData> pairs{random_pair(rng, 2, 5, 4, 4, 0.0), random_pair(rng, 2, 5, 4, 4, 0.0)};
  pairs[1].noise = {true, true};
  EXPECT_NEAR(distill_value(pairs), distill_value({pairs[0]}), 1e-14);
  pairs[0].noise = {true, true};
  EXPECT_EQ(distill_value(pairs), 0.0);
}

TEST(Distill, DecreasesAsPositiveScoreGrows) {
  Rng rng(11);
  std::vector<PairData> pairs{random_pair(rng, 1, 4, 3, 3, 0.0), random_pair(rng, 1, 4, 3, 3, 0.0)};
  const Eigen::RowVectorXd sims = pairs[0].concepts.row(0) * pairs[0].filtered.transpose();
  Eigen::Index best = 0, worst = 0;
  sims.maxCoeff(&best);
  sims.minCoeff(&worst);
  double prev = std::numeric_limits<double>::infinity();
  for (double w = 0.0; w <= 1.0; w += 0.25) {
    pairs[0].attention.setZero();
    pairs[0].attention(0, worst) = 1.0 - w;
    pairs[0].attention(0, best) += w;
    const double v = distill_value(pairs);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Distill, AttentionPositiveVariant) {
  Rng rng(12);
  PairData p = random_pair(rng, 2, 4, 3, 3, 0.0);
  DistillOptions o;
  o.attention_positive_in_denominator = true;
  EXPECT_NEAR(distill_value({p}, o), 0.0, 1e-12);
}

TEST(Gradients, AllAlignmentLossesMatchFiniteDifferences) {
  Rng rng(13);
  using gradcheck::check_input_gradients;
  const Matrix w0 = random_matrix(rng, 2, 3), w1 = random_matrix(rng, 2, 3);
  const Matrix r0 = random_matrix(rng, 4, 3), r1 = random_matrix(rng, 4, 3);
  const Matrix a0 = random_distributions(rng, 2, 4), a1 = random_distributions(rng, 2, 4);
  auto check = [](const gradcheck::InputBuilder& f, std::vector<Matrix> in) {
    const auto r = check_input_gradients(f, std::move(in));
    EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  };
  check([](ag::Tape&, const std::vector<ag::Var>& v) { return grounding_score_S(v[0], v[1]); }, {w0, r0});
  check([](ag::Tape&, const std::vector<ag::Var>& v) { return grounding_score_A(v[0], v[1], v[2]); }, {w0, r0, a0});
  check([](ag::Tape&, const std::vector<ag::Var>& v) { return contrastive_loss_from_scores(v[0]); },
        {random_matrix(rng, 2, 2)});
  check([](ag::Tape&, const std::vector<ag::Var>& v) { return contrastive_caption_loss({v[0], v[1]}, {v[2], v[3]}); },
        {w0, w1, r0, r1});
  for (bool variant : {false, true}) {
    check(
        [variant](ag::Tape& t, const std::vector<ag::Var>& v) {
          DistillOptions o;
          o.attention_positive_in_denominator = variant;
          std::vector<DistillPair> batch{{v[0], v[2], ag::slice_rows(v[2], 0, 4), v[4], {}},
                                         {v[1], v[3], ag::slice_rows(v[3], 0, 4), v[5], {false, true}}};
          return distill_loss(t, batch, o);
        },
        {w0, w1, r0, r1, a0, a1});
  }
}

TEST(Assemble, StageTotals) {
  const std::map<std::string, double> ones{{"det", 1}, {"cap", 1}, {"img", 1}, {"divmlm", 1}, {"distill", 1}};
  EXPECT_NEAR(assemble_losses(Stage::baseline, ones).total, 1.2, 1e-15);
  EXPECT_NEAR(assemble_losses(Stage::stage1, ones).total, 1.3, 1e-15);
  EXPECT_NEAR(assemble_losses(Stage::stage2, ones).total, 1.4, 1e-15);
  const std::map<std::string, double> zeros{{"det", 0}, {"cap", 0}, {"img", 0}, {"divmlm", 0}, {"distill", 0}};
  EXPECT_EQ(assemble_losses(Stage::stage2, zeros).total, 0.0);
  EXPECT_EQ(assemble_losses(Stage::stage1, ones).values.count("distill"), 0u);
  EXPECT_THROW(assemble_losses(Stage::stage2, {{"det", 1}}), ConfigError);
  LossWeights w;
  w.w["cap"] = 0.5;
  EXPECT_NEAR(assemble_losses(Stage::baseline, ones, w).total, 1.6, 1e-15);
  EXPECT_THROW(w["bogus"], ConfigError);
}

TEST(Assemble, WeightedTotalSkipsZeroWeights) {
  ag::Tape t;
  LossWeights w;
  w.w["img"] = 0.0;
  ag::Var det = t.variable(Matrix::Constant(1, 1, 2.0)), img = t.variable(Matrix::Constant(1, 1, 5.0));
  ag::Var total = weighted_total(t, {{"det", det}, {"img", img}}, w);
  EXPECT_EQ(total.scalar(), 2.0);
  t.backward(total);
  EXPECT_EQ(t.grad(img)(0, 0), 0.0);
  EXPECT_EQ(t.grad(det)(0, 0), 1.0);
}

TEST(Assemble, StageNames) {
  EXPECT_EQ(parse_stage("1"), Stage::stage1);
  EXPECT_EQ(parse_stage("stage2"), Stage::stage2);
  EXPECT_EQ(parse_stage("baseline"), Stage::baseline);
  EXPECT_THROW(parse_stage("3"), ConfigError);
}
