#include "kdlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kdlab/errors.hpp"
#include "kdlab/models.hpp"
#include "kdlab/rng.hpp"

namespace kdlab {

void ScoredPredictions::validate() const {
  if (!scores.defined() || scores.rank() != 2) {
    throw DimensionError("scored predictions need an [N, C] score matrix");
  }
  if (labels.size() != scores.dim(0)) {
    throw DimensionError("scores have " + std::to_string(scores.dim(0)) + " rows but " +
                         std::to_string(labels.size()) + " labels were given");
  }
  for (auto l : labels) {
    if (l >= scores.dim(1)) {
      throw ContractError("label " + std::to_string(l) + " outside [0, " +
                          std::to_string(scores.dim(1)) + ")");
    }
  }
}

double top1_accuracy(const ScoredPredictions& pred) {
  if (pred.labels.empty()) throw ContractError("top1_accuracy on empty predictions");
  pred.validate();
  const std::size_t n = pred.rows(), c = pred.classes();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = pred.scores.data().data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == pred.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::optional<double> average_precision(std::span<const double> scores,
                                        const std::vector<bool>& positives) {
  if (scores.size() != positives.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(positives.size()) + " flags");
  }
  const auto total_pos =
      static_cast<std::size_t>(std::count(positives.begin(), positives.end(), true));
  if (total_pos == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positives[order[rank]]) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  return ap / static_cast<double>(total_pos);
}

MeanApResult mean_ap(const ScoredPredictions& pred) {
  pred.validate();
  const std::size_t n = pred.rows(), c = pred.classes();
  MeanApResult result;
  result.per_class.resize(c);
  std::vector<double> column(n);
  std::vector<bool> positive(n);
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = pred.scores[i * c + j];
      positive[i] = pred.labels[i] == j;
    }
    result.per_class[j] = average_precision(column, positive);
    if (result.per_class[j]) {
      acc += *result.per_class[j];
      ++used;
    } else {
      ++result.skipped;
    }
  }
  if (used == 0) throw ContractError("mean_ap: no class has a positive sample");
  result.map = acc / static_cast<double>(used);
  return result;
}

std::optional<double> cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("euclidean_distance: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

Tensor random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (cols > rows) throw DimensionError("random_orthonormal needs rows >= cols");
  Rng rng = Rng::fork(seed, 0x0e7);
  // Columns Gram-Schmidt'ed twice for numerical orthogonality.
  std::vector<std::vector<double>> basis;
  while (basis.size() < cols) {
    std::vector<double> v(rows);
    for (double& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < rows; ++i) dot += u[i] * v[i];
        for (std::size_t i = 0; i < rows; ++i) v[i] -= dot * u[i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<double> out(rows * cols);
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t i = 0; i < rows; ++i) out[i * cols + j] = basis[j][i];
  }
  return Tensor({rows, cols}, std::move(out));
}

namespace {

Tensor project(const Tensor& features, std::size_t width, std::uint64_t seed) {
  const std::size_t d = features.dim(1);
  if (d == width) return features;
  NoGradScope no_grad;
  return matmul(features, random_orthonormal(d, width, seed));
}

}  // namespace

SimilarityReport compare_features(const Tensor& a, const Tensor& b, std::uint64_t seed) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("compare_features: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0);
  const std::size_t width = std::min(a.dim(1), b.dim(1));
  const Tensor pa = project(a, width, seed);
  const Tensor pb = project(b, width, seed + 1);

  SimilarityReport report;
  report.projected_dim = width;
  std::size_t defined = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto ra = pa.data().subspan(i * width, width);
    auto rb = pb.data().subspan(i * width, width);
    const auto cos = cosine_similarity(ra, rb);
    const double dist = euclidean_distance(ra, rb);
    report.per_pair.push_back({cos.value_or(std::numeric_limits<double>::quiet_NaN()), dist});
    if (cos) {
      report.cosine_mean += *cos;
      ++defined;
    }
    report.euclidean_mean += dist;
  }
  report.cosine_mean = defined ? report.cosine_mean / static_cast<double>(defined)
                               : std::numeric_limits<double>::quiet_NaN();
  report.euclidean_mean /= static_cast<double>(n);
  return report;
}

SimilarityReport compare_representations(Model& teacher, Model& student, const Dataset& data,
                                         const AugmentConfig& preprocessing,
                                         const std::string& layer, std::uint64_t seed) {
  if (data.size() == 0) throw ContractError("compare_representations on an empty dataset");
  constexpr std::size_t kChunk = 64;
  std::vector<double> fa, fb;
  std::size_t wa = 0, wb = 0;
  for (const auto& idx : batch_indices(data.size(), kChunk, false, 0)) {
    LabeledBatch batch = make_batch(data, idx, preprocessing, nullptr);
    Tensor a = teacher.capture(batch.images, layer, Mode::eval);
    Tensor b = student.capture(batch.images, layer, Mode::eval);
    wa = a.dim(1);
    wb = b.dim(1);
    fa.insert(fa.end(), a.data().begin(), a.data().end());
    fb.insert(fb.end(), b.data().begin(), b.data().end());
  }
  return compare_features(Tensor({data.size(), wa}, std::move(fa)),
                          Tensor({data.size(), wb}, std::move(fb)), seed);
}

}  // namespace kdlab
