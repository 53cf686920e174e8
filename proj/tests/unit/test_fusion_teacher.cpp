#include <gtest/gtest.h>

#include <cmath>

#include "mmcdet/fusion_teacher.hpp"
#include "mmcdet/synth_world.hpp"
#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"

using namespace mmcdet;
using ag::Matrix;

namespace {

Matrix random_unit_rows(Rng& rng, int n, int d) {
  Matrix m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
    m.row(i).normalize();
  }
  return m;
}

Matrix random_distributions(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = std::exp(2.0 * rng.normal());
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

std::vector<std::vector<int>> column_blocks(const FilteredProposals& f) {
  std::vector<std::vector<int>> blocks(f.per_concept.size());
  for (std::size_t k = 0; k < f.size(); ++k) blocks[static_cast<std::size_t>(f.block[k])].push_back(static_cast<int>(k));
  return blocks;
}

FilteredProposals one_each(int m) {
  FilteredProposals f;
  for (int i = 0; i < m; ++i) {
    f.per_concept.push_back({i});
    f.union_order.push_back(i);
    f.block.push_back(i);
  }
  return f;
}

double divergence_value(const Matrix& a, const FilteredProposals& f, double alpha, double exponent = 1.0) {
  ag::Tape t;
  return divergence_loss(t.constant(a), f, alpha, exponent).scalar();
}

struct TeacherFixture {
  explicit TeacherFixture(FusionConfig c = small_config())
      : cfg(c), vocab(Vocabulary::from_grammar(GrammarSpec::shapes_world(), cfg.model_dim, 3)),
        teacher(cfg, vocab, store, 21) {}

  static FusionConfig small_config() {
    FusionConfig c;
    c.layers = 2;
    c.heads = 2;
    c.model_dim = 8;
    c.feedforward_dim = 8;
    c.top_k = 2;
    return c;
  }

  std::vector<Box> boxes(int n) const {
    std::vector<Box> b;
    for (int i = 0; i < n; ++i) b.push_back({4.0 * i, 2.0 + i, 20.0 + 3 * i, 30.0 - i});
    return b;
  }

  FusionConfig cfg;
  nn::ParameterStore store;
  Vocabulary vocab;
  FusionTeacher teacher;
};

}  // namespace

TEST(Prefilter, WorkedExample) {
  Matrix c(1, 1), r(4, 1);
  c << 1.0;
  r << 0.9, 0.1, 0.5, 0.7;
  const auto f = prefilter_proposals(c, r, 2);
  EXPECT_EQ(f.per_concept[0], (std::vector<int>{0, 3}));
  EXPECT_EQ(f.union_order, (std::vector<int>{0, 3}));
}

TEST(Prefilter, KAtLeastNKeepsAllInOrder) {
  Rng rng(1);
  const auto f = prefilter_proposals(random_unit_rows(rng, 2, 4), random_unit_rows(rng, 5, 4), 9);
  EXPECT_EQ(f.per_concept[0], (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(f.union_order.size(), 10u);
  EXPECT_EQ(f.block, (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1}));
}

TEST(Prefilter, Errors) {
  Rng rng(1);
  EXPECT_THROW(prefilter_proposals(random_unit_rows(rng, 2, 4), random_unit_rows(rng, 5, 4), 0), ConfigError);
  EXPECT_THROW(prefilter_proposals(random_unit_rows(rng, 2, 4), Matrix(0, 4), 3), DegenerateInput);
}

TEST(Prefilter, MatchesSortOracleIncludingTies) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const int m = rng.uniform_int(1, 3), n = rng.uniform_int(1, 12), d = rng.uniform_int(1, 4), k = rng.uniform_int(1, 13);
    Matrix c(m, d), r(n, d);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = 0.5 * rng.uniform_int(-2, 2);
    for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = 0.5 * rng.uniform_int(-2, 2);
    const auto f = prefilter_proposals(c, r, k);
    ASSERT_EQ(f.per_concept.size(), static_cast<std::size_t>(m));
    std::vector<int> expected_union;
    for (int i = 0; i < m; ++i) {
      std::vector<double> sims;
      for (int j = 0; j < n; ++j) sims.push_back(oracle::dot_rows(c, i, r, j));
      const auto want = oracle::top_k(sims, k);
      EXPECT_EQ(f.per_concept[static_cast<std::size_t>(i)], want);
      expected_union.insert(expected_union.end(), want.begin(), want.end());
    }
    EXPECT_EQ(f.union_order, expected_union);
  }
}

TEST(Forward, RowsAreDistributionsOnePerView) {
  TeacherFixture fx;
  Rng rng(4);
  const auto caption = parse_caption("a red circle above a blue square and a green star", fx.vocab);
  const auto views = make_masked_views(caption, fx.vocab);
  for (int t = 0; t < 50; ++t) {
    const int n = rng.uniform_int(1, 9);
    ag::Tape tape;
    const auto out = fx.teacher.forward(tape, views, tape.constant(random_unit_rows(rng, n, 8)), fx.boxes(n), 64, 64);
    ASSERT_EQ(out.attention.rows(), 3);
    ASSERT_EQ(out.attention.cols(), n);
    EXPECT_EQ(out.mask_logits.rows(), 3);
    EXPECT_EQ(out.mask_logits.cols(), fx.vocab.size());
    EXPECT_EQ(out.layer, 1);
    for (int i = 0; i < 3; ++i) {
      EXPECT_NEAR(out.attention.value().row(i).sum(), 1.0, 1e-12);
      EXPECT_GE(out.attention.value().row(i).minCoeff(), 0.0);
    }
  }
}

TEST(Forward, RegionPermutationPermutesColumns) {
  TeacherFixture fx;
  Rng rng(5);
  const auto views = make_masked_views(parse_caption("a red circle above a blue square", fx.vocab), fx.vocab);
  const Matrix regions = random_unit_rows(rng, 5, 8);
  const auto boxes = fx.boxes(5);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix permuted(5, 8);
  std::vector<Box> pboxes;
  for (int i = 0; i < 5; ++i) {
    permuted.row(i) = regions.row(perm[i]);
    pboxes.push_back(boxes[static_cast<std::size_t>(perm[i])]);
  }
  ag::Tape t;
  const auto a = fx.teacher.forward(t, views, t.constant(regions), boxes, 64, 64);
  const auto b = fx.teacher.forward(t, views, t.constant(permuted), pboxes, 64, 64);
  for (int v = 0; v < 2; ++v) {
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(b.attention.value()(v, i), a.attention.value()(v, perm[i]), 1e-12);
  }
  EXPECT_LT((a.mask_logits.value() - b.mask_logits.value()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Forward, Errors) {
  TeacherFixture fx;
  const auto views = make_masked_views(parse_caption("a red circle", fx.vocab), fx.vocab);
  ag::Tape t;
  EXPECT_THROW(fx.teacher.forward(t, views, t.constant(Matrix::Zero(2, 5)), fx.boxes(2), 64, 64), ConfigError);
  EXPECT_THROW(fx.teacher.forward(t, views, t.constant(Matrix::Zero(2, 8)), fx.boxes(3), 64, 64), ConfigError);
  EXPECT_THROW(fx.teacher.forward(t, {}, t.constant(Matrix::Zero(2, 8)), fx.boxes(2), 64, 64), DegenerateInput);
  auto bad = TeacherFixture::small_config();
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TeacherFixture::small_config();
  bad.divergence_alpha = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(MlmLoss, Examples) {
  ag::Tape t;
  EXPECT_NEAR(mlm_loss(t.constant(Matrix::Zero(1, 20)), {7}).scalar(), std::log(20.0), 1e-12);
  Matrix big = Matrix::Zero(1, 20);
  big(0, 7) = 100;
  EXPECT_LT(mlm_loss(t.constant(big), {7}).scalar(), 1e-12);
  Matrix two(2, 3);
  two << 0.3, -1.0, 2.0, 1.5, 0.2, -0.4;
  const double a = mlm_loss(t.constant(two.row(0)), {1}).scalar(), b = mlm_loss(t.constant(two.row(1)), {2}).scalar();
  EXPECT_NEAR(mlm_loss(t.constant(two), {1, 2}).scalar(), 0.5 * (a + b), 1e-12);
}

TEST(DivergenceLoss, IdenticalRowsGiveAlpha) {
  Rng rng(6);
  for (int m = 1; m <= 4; ++m) {
    Matrix a(m, 3 * m);
    const Matrix row = random_distributions(rng, 1, 3 * m);
    for (int i = 0; i < m; ++i) a.row(i) = row;
    FilteredProposals f;
    for (int i = 0; i < m; ++i) {
      f.per_concept.push_back({3 * i, 3 * i + 1, 3 * i + 2});
      for (int k = 0; k < 3; ++k) {
        f.union_order.push_back(3 * i + k);
        f.block.push_back(i);
      }
    }
    EXPECT_NEAR(divergence_value(a, f, 0.5), 0.5, 1e-12);
  }
}

TEST(DivergenceLoss, DisjointOneHotRowsGiveZero) {
  Matrix a(2, 2);
  a << 1, 0, 0, 1;
  EXPECT_EQ(divergence_value(a, one_each(2), 0.5), 0.0);
  EXPECT_NEAR(oracle::divergence(a, {{0}, {1}}, 0.5), 0.0, 1e-15);
}

TEST(DivergenceLoss, SingleConceptIsAlphaWithZeroGradient) {
  Rng rng(3);
  ag::Tape t;
  ag::Var a = t.variable(random_distributions(rng, 1, 4));
  FilteredProposals f{{{0, 1, 2, 3}}, {0, 1, 2, 3}, {0, 0, 0, 0}};
  ag::Var l = divergence_loss(a, f, 0.5);
  EXPECT_NEAR(l.scalar(), 0.5, 1e-12);
  t.backward(l);
  EXPECT_LT(t.grad(a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DivergenceLoss, MatchesDoubleSumOracle) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const int m = rng.uniform_int(1, 4), n = rng.uniform_int(1, 8), k = rng.uniform_int(1, 5);
    const auto f = prefilter_proposals(random_unit_rows(rng, m, 3), random_unit_rows(rng, n, 3), k);
    const Matrix a = random_distributions(rng, m, static_cast<int>(f.size()));
    const double alpha = 0.1 + rng.uniform() * 2.0, exponent = t % 2 ? 1.0 : 2.0;
    EXPECT_NEAR(divergence_value(a, f, alpha, exponent), oracle::divergence(a, column_blocks(f), alpha, exponent), 1e-12);
  }
}

TEST(DivergenceLoss, InvariantToConsistentPermutation) {
  Rng rng(8);
  const auto f = prefilter_proposals(random_unit_rows(rng, 3, 4), random_unit_rows(rng, 6, 4), 2);
  const int n = static_cast<int>(f.size());
  const Matrix a = random_distributions(rng, 3, n);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Matrix pa(3, n);
  FilteredProposals pf = f;
  for (int k = 0; k < n; ++k) {
    pa.col(k) = a.col(perm[k]);
    pf.union_order[k] = f.union_order[perm[k]];
    pf.block[k] = f.block[perm[k]];
  }
  EXPECT_NEAR(divergence_value(a, f, 3.0), divergence_value(pa, pf, 3.0), 1e-12);
}

TEST(DivergenceLoss, ShapeMismatchIsConfigError) {
  EXPECT_THROW(divergence_value(Matrix::Constant(2, 3, 1.0 / 3), one_each(2), 0.5), ConfigError);
}

TEST(DmlmLoss, SumOfComponents) {
  ag::Tape t;
  FusionConfig cfg;
  const Matrix same = Matrix::Constant(2, 2, 0.5);
  EXPECT_NEAR(dmlm_loss(t.constant(same), one_each(2), t.constant(Matrix::Zero(2, 20)), {1, 2}, cfg).scalar(),
              0.5 + std::log(20.0), 1e-12);
  Matrix onehot(2, 2);
  onehot << 1, 0, 0, 1;
  Matrix logits = Matrix::Zero(2, 20);
  logits(0, 1) = logits(1, 2) = 100;
  EXPECT_LT(dmlm_loss(t.constant(onehot), one_each(2), t.constant(logits), {1, 2}, cfg).scalar(), 1e-12);
  cfg.divergence_enabled = false;
  EXPECT_NEAR(dmlm_loss(t.constant(same), one_each(2), t.constant(Matrix::Zero(2, 20)), {1, 2}, cfg).scalar(),
              std::log(20.0), 1e-12);
}

TEST(DmlmLoss, ParameterGradientsMatchFiniteDifferences) {
  TeacherFixture fx;
  Rng rng(9);
  const auto caption = parse_caption("a red circle above a blue square", fx.vocab);
  const auto views = make_masked_views(caption, fx.vocab);
  std::vector<int> targets;
  for (const auto& v : views) targets.push_back(v.target);
  const Matrix regions = random_unit_rows(rng, 4, 8);
  Matrix concepts(2, 8);
  for (int i = 0; i < 2; ++i) concepts.row(i) = fx.vocab.embedding(fx.vocab.word(targets[static_cast<std::size_t>(i)]));
  const auto f = prefilter_proposals(concepts, regions, 2);
  ASSERT_EQ(f.size(), 4u);
  Matrix p(4, 8);
  std::vector<Box> boxes;
  for (int k = 0; k < 4; ++k) {
    p.row(k) = regions.row(f.union_order[static_cast<std::size_t>(k)]);
    boxes.push_back(fx.boxes(4)[static_cast<std::size_t>(f.union_order[static_cast<std::size_t>(k)])]);
  }
  {
    ag::Tape t;
    const auto out = fx.teacher.forward(t, views, t.constant(p), boxes, 64, 64);
    ASSERT_GT(divergence_loss(out.attention, f, fx.cfg.divergence_alpha).scalar(), 0.05) << "hinge must be active";
  }
  const auto r = gradcheck::check_parameter_gradients(fx.store, [&](ag::Tape& t) {
    const auto out = fx.teacher.forward(t, views, t.constant(p), boxes, 64, 64);
    return dmlm_loss(out.attention, f, out.mask_logits, targets, fx.cfg);
  });
  EXPECT_GT(r.coordinates, 500);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(DmlmLoss, RegionGradientsMatchFiniteDifferences) {
  TeacherFixture fx;
  Rng rng(10);
  const auto views = make_masked_views(parse_caption("a red circle above a blue square", fx.vocab), fx.vocab);
  std::vector<int> targets;
  for (const auto& v : views) targets.push_back(v.target);
  FilteredProposals f{{{0, 1}, {2, 3}}, {0, 1, 2, 3}, {0, 0, 1, 1}};
  const auto r = gradcheck::check_input_gradients(
      [&](ag::Tape& t, const std::vector<ag::Var>& v) {
        const auto out = fx.teacher.forward(t, views, v[0], fx.boxes(4), 64, 64);
        return dmlm_loss(out.attention, f, out.mask_logits, targets, fx.cfg);
      },
      {random_unit_rows(rng, 4, 8)});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(NoiseFlags, Examples) {
  Matrix logits = Matrix::Zero(3, 5);
  logits(0, 2) = 9;
  logits(1, 4) = 9;
  const auto flags = predict_masked_and_flag_noise(logits, {2, 2, 0});
  EXPECT_FALSE(flags[0].is_noise);
  EXPECT_EQ(flags[0].predicted, 2);
  EXPECT_TRUE(flags[1].is_noise);
  EXPECT_EQ(flags[2].predicted, 0);
  EXPECT_FALSE(flags[2].is_noise);
  EXPECT_THROW(predict_masked_and_flag_noise(logits, {1}), ConfigError);
}
