#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace kdlab::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[m,n] (+)= op(A)·op(B), all row-major. op(A) is m×k, op(B) is k×n.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap cm(c, M, N);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  } else {
    cm.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
  }
}

}  // namespace kdlab::detail
