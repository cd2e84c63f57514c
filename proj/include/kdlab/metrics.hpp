#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdlab/data.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

class Model;

// Per-class confidences [N, C] with the true class of each row.
struct ScoredPredictions {
  Tensor scores;
  std::vector<std::size_t> labels;

  std::size_t rows() const { return scores.dim(0); }
  std::size_t classes() const { return scores.dim(1); }
  void validate() const;
};

// Fraction of rows whose argmax equals the label; ties go to the lowest class index.
double top1_accuracy(const ScoredPredictions& pred);

// All-points average precision. Scores are ranked descending with ties kept in
// input order. Returns nullopt when there are no positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        const std::vector<bool>& positives);

struct MeanApResult {
  double map = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt for classes without positives
  std::size_t skipped = 0;
};

MeanApResult mean_ap(const ScoredPredictions& pred);

// nullopt if either vector has zero norm.
std::optional<double> cosine_similarity(std::span<const double> a, std::span<const double> b);
double euclidean_distance(std::span<const double> a, std::span<const double> b);

struct SimilarityPair {
  double cosine;
  double euclidean;
};

struct SimilarityReport {
  double cosine_mean = 0.0;
  double euclidean_mean = 0.0;
  std::vector<SimilarityPair> per_pair;
  std::size_t projected_dim = 0;
};

// Column-orthonormal [rows, cols] matrix (rows >= cols) from a seeded Gaussian draw.
Tensor random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed);

// Row-wise comparison of two feature matrices [N, d_a] and [N, d_b]. When the
// widths differ, the wider side is mapped to the narrower width through a
// seeded random orthonormal projection.
SimilarityReport compare_features(const Tensor& a, const Tensor& b, std::uint64_t seed = 0);

// Eval-mode activations of `layer` for every (preprocessed) sample of `data`,
// compared row-wise.
SimilarityReport compare_representations(Model& teacher, Model& student, const Dataset& data,
                                         const AugmentConfig& preprocessing,
                                         const std::string& layer = "features",
                                         std::uint64_t seed = 0);

}  // namespace kdlab
