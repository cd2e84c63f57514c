#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "kdlab/errors.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/models.hpp"
#include "test_util.hpp"

using namespace kdlab;
using kdlab::testing::random_tensor;

namespace {

// Rank of element i: elements with a higher score, or an equal score and a
// lower index, come first. AP = mean over positives of precision at their rank.
double ap_reference(const std::vector<double>& s, const std::vector<bool>& pos) {
  const std::size_t n = s.size();
  auto rank = [&](std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
    return r;
  };
  // (rank, precision at rank) per positive, summed best rank first
  std::vector<std::pair<std::size_t, double>> terms;
  for (std::size_t i = 0; i < n; ++i) {
    if (!pos[i]) continue;
    const std::size_t ri = rank(i);
    std::size_t hits = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (pos[j] && rank(j) <= ri) ++hits;
    terms.emplace_back(ri, static_cast<double>(hits) / static_cast<double>(ri));
  }
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (const auto& t : terms) total += t.second;
  return total / static_cast<double>(terms.size());
}

double map_reference(const Tensor& scores, const std::vector<std::size_t>& labels) {
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> col(n);
    std::vector<bool> pos(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * c + k];
      pos[i] = labels[i] == k;
      any |= pos[i];
    }
    if (!any) continue;
    sum += ap_reference(col, pos);
    ++used;
  }
  return sum / static_cast<double>(used);
}

}  // namespace

// ---------------------------------------------------------------- accuracy

TEST(Accuracy, OneHotCorrect) {
  ScoredPredictions p{Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), {0, 1, 2}};
  EXPECT_EQ(top1_accuracy(p), 1.0);
}

TEST(Accuracy, TiesGoToLowestIndex) {
  ScoredPredictions p{Tensor::full({4, 3}, 0.3), {0, 1, 0, 2}};
  EXPECT_EQ(top1_accuracy(p), 0.5);
}

TEST(Accuracy, MatchesLoop) {
  Rng rng(1);
  Tensor s = random_tensor({20, 5}, 2);
  std::vector<std::size_t> y(20);
  for (auto& v : y) v = rng.below(5);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 5; ++j)
      if (s[i * 5 + j] > s[i * 5 + best]) best = j;
    hits += best == y[i];
  }
  EXPECT_EQ(top1_accuracy({s, y}), static_cast<double>(hits) / 20.0);
}

TEST(Accuracy, EmptyAndBadLabels) {
  ScoredPredictions empty;
  EXPECT_THROW(top1_accuracy(empty), ContractError);
  ScoredPredictions bad{Tensor::zeros({1, 2}), {2}};
  EXPECT_THROW(top1_accuracy(bad), ContractError);
}

// ---------------------------------------------------------------- AP

TEST(AveragePrecision, PerfectRanking) {
  std::vector<double> s{0.9, 0.8, 0.1, 0.05};
  EXPECT_EQ(*average_precision(s, {true, true, false, false}), 1.0);
}

TEST(AveragePrecision, SinglePositiveSecond) {
  std::vector<double> s{0.9, 0.1};
  EXPECT_EQ(*average_precision(s, {false, true}), 0.5);
}

TEST(AveragePrecision, NoPositivesIsUndefined) {
  std::vector<double> s{0.9, 0.1};
  EXPECT_FALSE(average_precision(s, {false, false}).has_value());
}

TEST(AveragePrecision, TiesKeepIndexOrder) {
  std::vector<double> s{0.5, 0.5};
  EXPECT_EQ(*average_precision(s, {false, true}), 0.5);
  EXPECT_EQ(*average_precision(s, {true, false}), 1.0);
}

TEST(AveragePrecision, LengthMismatch) {
  std::vector<double> s{0.5, 0.5};
  EXPECT_THROW(average_precision(s, {true}), DimensionError);
}

TEST(AveragePrecision, Random30MatchesReference) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(30);
    std::vector<bool> pos(30);
    bool any = false;
    for (std::size_t i = 0; i < 30; ++i) {
      s[i] = std::round(rng.uniform() * 10) / 10;  // coarse values force ties
      pos[i] = rng.bernoulli(0.3);
      any |= pos[i];
    }
    if (!any) pos[0] = true;
    EXPECT_NEAR(*average_precision(s, pos), ap_reference(s, pos), 1e-12);
  }
}

TEST(AveragePrecision, ExhaustiveSmallInstances) {
  Rng rng(4);
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> s(n);
    for (auto& v : s) v = std::round(rng.uniform() * 4);  // ties included
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
      std::vector<bool> pos(n);
      for (std::size_t i = 0; i < n; ++i) pos[i] = (mask >> i) & 1u;
      ASSERT_EQ(*average_precision(s, pos), ap_reference(s, pos)) << "n=" << n << " mask=" << mask;
    }
  }
}

TEST(AveragePrecision, MonotoneTransformInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(25), t(25);
    std::vector<bool> pos(25);
    for (std::size_t i = 0; i < 25; ++i) {
      s[i] = rng.uniform(-3, 3);
      t[i] = std::exp(2.0 * s[i]) + 7.0;
      pos[i] = rng.bernoulli(0.4);
    }
    pos[3] = true;
    EXPECT_EQ(*average_precision(s, pos), *average_precision(t, pos));
  }
}

// ---------------------------------------------------------------- mAP

TEST(MeanAp, PerfectClassifier) {
  ScoredPredictions p{Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), {0, 1, 2}};
  EXPECT_EQ(mean_ap(p).map, 1.0);
}

TEST(MeanAp, SingleClassEqualsItsAp) {
  Tensor s = random_tensor({6, 3}, 6);
  const std::vector<std::size_t> y(6, 1);
  auto res = mean_ap({s, y});
  std::vector<double> col;
  for (std::size_t i = 0; i < 6; ++i) col.push_back(s[i * 3 + 1]);
  EXPECT_EQ(res.map, *average_precision(col, std::vector<bool>(6, true)));
  EXPECT_EQ(res.skipped, 2u);
  EXPECT_FALSE(res.per_class[0].has_value());
}

TEST(MeanAp, Random40x4MatchesBruteForce) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor s = random_tensor({40, 4}, 500 + trial);
    std::vector<std::size_t> y(40);
    for (auto& v : y) v = rng.below(4);
    EXPECT_NEAR(mean_ap({s, y}).map, map_reference(s, y), 1e-12);
  }
}

TEST(MeanAp, RowLabelMismatch) {
  ScoredPredictions p{Tensor::zeros({2, 2}), {0}};
  EXPECT_THROW(mean_ap(p), DimensionError);
}

TEST(MeanAp, PermutationInvariant) {
  Rng rng(8);
  Tensor s = random_tensor({30, 4}, 9);
  std::vector<std::size_t> y(30);
  for (auto& v : y) v = rng.below(4);
  auto perm = rng.permutation(30);
  std::vector<double> ps;
  std::vector<std::size_t> py;
  for (auto i : perm) {
    for (std::size_t j = 0; j < 4; ++j) ps.push_back(s[i * 4 + j]);
    py.push_back(y[i]);
  }
  ScoredPredictions a{s, y}, b{Tensor({30, 4}, ps), py};
  EXPECT_NEAR(mean_ap(a).map, mean_ap(b).map, 1e-12);
  EXPECT_EQ(top1_accuracy(a), top1_accuracy(b));
}

// ---------------------------------------------------------------- similarity

TEST(Cosine, Basics) {
  std::vector<double> a{1, 2, 3};
  EXPECT_NEAR(*cosine_similarity(a, a), 1.0, 1e-15);
  std::vector<double> x{1, 0}, y{0, 1};
  EXPECT_EQ(*cosine_similarity(x, y), 0.0);
  std::vector<double> p{1, 2}, q{2, 4};
  EXPECT_NEAR(*cosine_similarity(p, q), 1.0, 1e-15);
  std::vector<double> z{0, 0};
  EXPECT_FALSE(cosine_similarity(z, p).has_value());
}

TEST(Cosine, ScaleInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(16), b(16), cb(16);
    const double c = rng.uniform(0.01, 100);
    for (std::size_t i = 0; i < 16; ++i) {
      a[i] = rng.uniform(-1, 1);
      b[i] = rng.uniform(-1, 1);
      cb[i] = c * b[i];
    }
    const double v = *cosine_similarity(a, b);
    EXPECT_NEAR(*cosine_similarity(a, cb), v, 1e-12);
    EXPECT_GE(v, -1 - 1e-9);
    EXPECT_LE(v, 1 + 1e-9);
  }
}

TEST(Euclidean, Basics) {
  std::vector<double> a{0, 0}, b{3, 4};
  EXPECT_EQ(euclidean_distance(a, a), 0.0);
  EXPECT_EQ(euclidean_distance(a, b), 5.0);
  std::vector<double> c{1};
  EXPECT_THROW(euclidean_distance(a, c), DimensionError);
  EXPECT_THROW(cosine_similarity(a, c), DimensionError);
}

TEST(Euclidean, MatchesLoop) {
  Rng rng(11);
  std::vector<double> a(64), b(64);
  double s = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    a[i] = rng.uniform(-2, 2);
    b[i] = rng.uniform(-2, 2);
    s += (a[i] - b[i]) * (a[i] - b[i]);
  }
  EXPECT_NEAR(euclidean_distance(a, b), std::sqrt(s), 1e-12);
}

TEST(Euclidean, TriangleInequality) {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(8), b(8), c(8);
    for (std::size_t i = 0; i < 8; ++i) {
      a[i] = rng.uniform(-5, 5);
      b[i] = rng.uniform(-5, 5);
      c[i] = rng.uniform(-5, 5);
    }
    EXPECT_LE(euclidean_distance(a, c), euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9);
  }
}

TEST(Projection, ColumnsAreOrthonormal) {
  Tensor q = random_orthonormal(20, 6, 13);
  ASSERT_EQ(q.shape(), (Shape{20, 6}));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double d = 0.0;
      for (std::size_t r = 0; r < 20; ++r) d += q[r * 6 + i] * q[r * 6 + j];
      EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-12);
    }
  Tensor q2 = random_orthonormal(20, 6, 13);
  for (std::size_t i = 0; i < q.numel(); ++i) EXPECT_EQ(q[i], q2[i]);
}

TEST(CompareFeatures, DifferentWidthsProjectToNarrower) {
  Tensor a = random_tensor({5, 12}, 14);
  Tensor b = random_tensor({5, 4}, 15);
  SimilarityReport r = compare_features(a, b, 3);
  EXPECT_EQ(r.projected_dim, 4u);
  EXPECT_EQ(r.per_pair.size(), 5u);
  for (const auto& p : r.per_pair) {
    EXPECT_GE(p.cosine, -1 - 1e-9);
    EXPECT_LE(p.cosine, 1 + 1e-9);
    EXPECT_GE(p.euclidean, 0.0);
  }
  EXPECT_THROW(compare_features(a, random_tensor({4, 4}, 16)), DimensionError);
}

TEST(CompareRepresentations, ModelWithItself) {
  auto m = make_model("vit", {1, 8, 3}, 1);
  Dataset ds;
  ds.images = random_tensor({7, 1, 8, 8}, 17, 0, 1);
  ds.labels = {0, 1, 2, 0, 1, 2, 0};
  ds.class_names = {"a", "b", "c"};
  AugmentConfig pre;
  pre.target_h = pre.target_w = 8;
  SimilarityReport r = compare_representations(*m, *m, ds, pre);
  EXPECT_EQ(r.per_pair.size(), 7u);
  EXPECT_NEAR(r.cosine_mean, 1.0, 1e-9);
  EXPECT_NEAR(r.euclidean_mean, 0.0, 1e-12);
  auto teacher = make_model("teacher", {1, 8, 3}, 2);
  SimilarityReport cross = compare_representations(*teacher, *m, ds, pre);
  EXPECT_EQ(cross.per_pair.size(), 7u);
  EXPECT_GT(cross.projected_dim, 0u);
  EXPECT_THROW(compare_representations(*teacher, *m, Dataset{}, pre), ContractError);
}
