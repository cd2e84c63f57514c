#pragma once

#include <cstddef>

#include "kdlab/tensor.hpp"

namespace kdlab {

enum class Mode { train, eval };

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// ca * a + cb * b for equally shaped tensors.
Tensor weighted_sum(const Tensor& a, double ca, const Tensor& b, double cb);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// b's shape must equal the trailing dims of x; b is added to every leading slice.
Tensor add_trailing(const Tensor& x, const Tensor& b);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]·[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k]·[B,k,n]
Tensor transpose_last(const Tensor& x);           // [B,m,n] -> [B,n,m]
// x[..., in] · w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Activations.
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation

// Temperature-scaled softmax over the last axis. t must be positive.
Tensor softmax_t(const Tensor& logits, double t);

// Convolution and normalization.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  static BatchNormStats fresh(std::size_t channels);
};

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Train mode uses batch statistics and updates `stats`; eval mode reads them.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, Mode mode);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// Spatial and token plumbing.
Tensor global_avg_pool2d(const Tensor& x);  // [N,C,H,W] -> [N,C]
Tensor mean_tokens(const Tensor& x);        // [N,n,d] -> [N,d]
// [N,C,H,W] -> [N, (H/p)(W/p), C·p·p]; patches in raster order, features (c, dy, dx).
Tensor patchify(const Tensor& images, std::size_t patch);
// [N,n,d] + token[d] -> [N,n+1,d] with the token at the last position.
Tensor append_token(const Tensor& x, const Tensor& token);
Tensor select_token(const Tensor& x, std::size_t index);  // [N,n,d] -> [N,d]
// part-th third of [N,n,3d] as [N·h, n, d/h].
Tensor split_heads(const Tensor& qkv, std::size_t part, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);  // [N·h,n,dh] -> [N,n,h·dh]
// 2x2 neighbourhood concat: [N, gh·gw, d] -> [N, (gh/2)(gw/2), 4d], order (dy, dx, d).
Tensor merge_patches(const Tensor& x, std::size_t grid_h, std::size_t grid_w);

}  // namespace kdlab
