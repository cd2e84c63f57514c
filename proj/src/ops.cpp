#include "kdlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "gemm.hpp"
#include "kdlab/errors.hpp"

namespace kdlab {

namespace {

using Buffer = std::vector<double>;

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(x.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Buffer copy_of(const Tensor& t) { return Buffer(t.data().begin(), t.data().end()); }

}  // namespace

// ---------------------------------------------------------------------------
// elementwise / reductions

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g) {
                          for (const Tensor* t : {&a, &b}) {
                            if (double* s = grad_sink(*t)) {
                              for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
                            }
                          }
                        },
                        "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g) {
                          if (double* s = grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * b[i];
                          }
                          if (double* s = grad_sink(b)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * a[i];
                          }
                        },
                        "mul");
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_op_result(x.shape(), std::move(out), {x},
                        [x, factor](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * factor;
                          }
                        },
                        "scale");
}

Tensor weighted_sum(const Tensor& a, double ca, const Tensor& b, double cb) {
  require_same_shape(a, b, "weighted_sum");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ca * a[i] + cb * b[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [a, b, ca, cb](std::span<const double> g) {
                          if (double* s = grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += ca * g[i];
                          }
                          if (double* s = grad_sink(b)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += cb * g[i];
                          }
                        },
                        "weighted_sum");
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op_result({1}, {total}, {x},
                        [x](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < x.numel(); ++i) s[i] += g[0];
                          }
                        },
                        "sum");
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op_result({1}, {total / n}, {x},
                        [x, n](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            const double share = g[0] / n;
                            for (std::size_t i = 0; i < x.numel(); ++i) s[i] += share;
                          }
                        },
                        "mean");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return make_op_result(std::move(shape), copy_of(x), {x},
                        [x](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
                          }
                        },
                        "reshape");
}

Tensor add_trailing(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw DimensionError("add_trailing: " + shape_str(bs) + " is not a suffix of " +
                         shape_str(xs));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = x.numel() / inner;
  Buffer out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + b[i];
  }
  return make_op_result(xs, std::move(out), {x, b},
                        [x, b, inner, outer](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
                          }
                          if (double* s = grad_sink(b)) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t i = 0; i < inner; ++i) s[i] += g[o * inner + i];
                            }
                          }
                        },
                        "add_trailing");
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  Buffer out(m * n);
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_op_result({m, n}, std::move(out), {a, b},
                        [a, b, m, n, k](std::span<const double> g) {
                          if (double* s = grad_sink(a)) {
                            detail::gemm(false, true, m, k, n, g.data(), b.data().data(), s, true);
                          }
                          if (double* s = grad_sink(b)) {
                            detail::gemm(true, false, k, n, m, a.data().data(), g.data(), s, true);
                          }
                        },
                        "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  Buffer out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, m, n, k, a.data().data() + i * m * k,
                 b.data().data() + i * k * n, out.data() + i * m * n, false);
  }
  return make_op_result({batch, m, n}, std::move(out), {a, b},
                        [a, b, batch, m, n, k](std::span<const double> g) {
                          double* sa = grad_sink(a);
                          double* sb = grad_sink(b);
                          for (std::size_t i = 0; i < batch; ++i) {
                            const double* gi = g.data() + i * m * n;
                            if (sa) {
                              detail::gemm(false, true, m, k, n, gi, b.data().data() + i * k * n,
                                           sa + i * m * k, true);
                            }
                            if (sb) {
                              detail::gemm(true, false, k, n, m, a.data().data() + i * m * k, gi,
                                           sb + i * k * n, true);
                            }
                          }
                        },
                        "bmm");
}

Tensor transpose_last(const Tensor& x) {
  require_rank(x, 3, "transpose_last");
  const std::size_t batch = x.dim(0), m = x.dim(1), n = x.dim(2);
  Buffer out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = x.data().data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
  }
  return make_op_result({batch, n, m}, std::move(out), {x},
                        [x, batch, m, n](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t b = 0; b < batch; ++b) {
                              const double* gb = g.data() + b * m * n;
                              double* sb = s + b * m * n;
                              for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < n; ++j) sb[i * n + j] += gb[j * m + i];
                              }
                            }
                          }
                        },
                        "transpose_last");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(w, 2, "linear");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Buffer out(rows * out_dim);
  detail::gemm(false, false, rows, out_dim, in, x.data().data(), w.data().data(), out.data(),
               false);
  if (has_bias) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bias[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op_result(
      std::move(shape), std::move(out), std::move(inputs),
      [x, w, bias, has_bias, rows, in, out_dim](std::span<const double> g) {
        if (double* s = grad_sink(x)) {
          detail::gemm(false, true, rows, in, out_dim, g.data(), w.data().data(), s, true);
        }
        if (double* s = grad_sink(w)) {
          detail::gemm(true, false, in, out_dim, rows, x.data().data(), g.data(), s, true);
        }
        if (has_bias) {
          if (double* s = grad_sink(bias)) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < out_dim; ++j) s[j] += g[r * out_dim + j];
            }
          }
        }
      },
      "linear");
}

// ---------------------------------------------------------------------------
// activations

Tensor relu(const Tensor& x) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_op_result(x.shape(), std::move(out), {x},
                        [x](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (x[i] > 0.0) s[i] += g[i];
                            }
                          }
                        },
                        "relu");
}

namespace {

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

Tensor gelu(const Tensor& x) {
  Buffer out(x.numel());
  auto tanhs = std::make_shared<Buffer>(x.numel());  // reused by backward
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    const double th = std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v));
    (*tanhs)[i] = th;
    out[i] = 0.5 * v * (1.0 + th);
  }
  return make_op_result(x.shape(), std::move(out), {x},
                        [x, tanhs](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            const double* xv = x.data().data();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double v = xv[i];
                              const double th = (*tanhs)[i];
                              const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
                              s[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner);
                            }
                          }
                        },
                        "gelu");
}

Tensor softmax_t(const Tensor& logits, double t) {
  if (!(t > 0.0)) throw ParameterError("softmax_t: temperature must be positive");
  const std::size_t cols = logits.shape().back();
  const std::size_t rows = logits.numel() / cols;
  auto probs = std::make_shared<Buffer>(logits.numel());
  auto& p = *probs;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * cols;
    double* y = p.data() + r * cols;
    double top = z[0];
    for (std::size_t j = 1; j < cols; ++j) top = std::max(top, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp((z[j] - top) / t);
      denom += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= denom;
  }
  return make_op_result(logits.shape(), p, {logits},
                        [logits, probs, rows, cols, t](std::span<const double> g) {
                          double* s = grad_sink(logits);
                          if (!s) return;
                          const auto& p = *probs;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* y = p.data() + r * cols;
                            const double* gr = g.data() + r * cols;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
                            for (std::size_t j = 0; j < cols; ++j) {
                              s[r * cols + j] += y[j] * (gr[j] - dot) / t;
                            }
                          }
                        },
                        "softmax_t");
}

// ---------------------------------------------------------------------------
// convolution

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t np = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t np = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " +
                         std::to_string(x.dim(1)) + " channels but kernel " +
                         shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 stride,   padding,  0,        0};
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{g.f}) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for kernel " +
                         shape_str(w.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t np = g.positions();
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.f * np;
  Buffer out(g.n * out_stride);
  Buffer cols(g.patch() * np);
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(x.data().data() + i * in_stride, g, cols.data());
    double* dst = out.data() + i * out_stride;
    detail::gemm(false, false, g.f, np, g.patch(), w.data().data(), cols.data(), dst, false);
    if (has_bias) {
      for (std::size_t f = 0; f < g.f; ++f) {
        for (std::size_t p = 0; p < np; ++p) dst[f * np + p] += bias[f];
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op_result(
      {g.n, g.f, g.oh, g.ow}, std::move(out), std::move(inputs),
      [x, w, bias, has_bias, g, np, in_stride, out_stride](std::span<const double> grad) {
        double* sx = grad_sink(x);
        double* sw = grad_sink(w);
        double* sb = has_bias ? grad_sink(bias) : nullptr;
        Buffer cols(g.patch() * np);
        Buffer dcols(sx ? g.patch() * np : 0);
        for (std::size_t i = 0; i < g.n; ++i) {
          const double* gi = grad.data() + i * out_stride;
          if (sw) {
            im2col(x.data().data() + i * in_stride, g, cols.data());
            detail::gemm(false, true, g.f, g.patch(), np, gi, cols.data(), sw, true);
          }
          if (sx) {
            detail::gemm(true, false, g.patch(), np, g.f, w.data().data(), gi, dcols.data(),
                         false);
            col2im_add(dcols.data(), g, sx + i * in_stride);
          }
          if (sb) {
            for (std::size_t f = 0; f < g.f; ++f) {
              for (std::size_t p = 0; p < np; ++p) sb[f] += gi[f * np + p];
            }
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// normalization

BatchNormStats BatchNormStats::fresh(std::size_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, Mode mode) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &stats.running_mean, &stats.running_var}) {
    if (p->shape() != Shape{c}) {
      throw DimensionError("batchnorm2d: per-channel tensor " + shape_str(p->shape()) +
                           " for input " + shape_str(x.shape()));
    }
  }
  const std::size_t count = n * hw;
  auto normalized = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(c);
  Buffer out(x.numel());

  if (mode == Mode::train) {
    if (count < 2) {
      throw DegenerateBatchError("batchnorm2d: train mode needs at least 2 values per channel, got " +
                                 shape_str(x.shape()));
    }
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = x.data().data() + (i * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) mu += src[p];
      }
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = x.data().data() + (i * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) var += (src[p] - mu) * (src[p] - mu);
      }
      var /= static_cast<double>(count);
      const double istd = 1.0 / std::sqrt(var + kNormEpsilon);
      (*inv_std)[ch] = istd;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double xh = (x[base + p] - mu) * istd;
          (*normalized)[base + p] = xh;
          out[base + p] = gamma[ch] * xh + beta[ch];
        }
      }
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      rm[ch] = (1.0 - kBatchNormMomentum) * rm[ch] + kBatchNormMomentum * mu;
      rv[ch] = (1.0 - kBatchNormMomentum) * rv[ch] + kBatchNormMomentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mu = stats.running_mean[ch];
      const double istd = 1.0 / std::sqrt(stats.running_var[ch] + kNormEpsilon);
      (*inv_std)[ch] = istd;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double xh = (x[base + p] - mu) * istd;
          (*normalized)[base + p] = xh;
          out[base + p] = gamma[ch] * xh + beta[ch];
        }
      }
    }
  }

  const bool batch_stats = mode == Mode::train;
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, normalized, inv_std, n, c, hw, count, batch_stats](std::span<const double> g) {
        const auto& xh = *normalized;
        double* sx = grad_sink(x);
        double* sg = grad_sink(gamma);
        double* sb = grad_sink(beta);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
              sum_g += g[base + p];
              sum_gx += g[base + p] * xh[base + p];
            }
          }
          if (sg) sg[ch] += sum_gx;
          if (sb) sb[ch] += sum_g;
          if (!sx) continue;
          const double k = gamma[ch] * (*inv_std)[ch];
          const double mean_g = sum_g / static_cast<double>(count);
          const double mean_gx = sum_gx / static_cast<double>(count);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t idx = base + p;
              sx[idx] += batch_stats ? k * (g[idx] - mean_g - xh[idx] * mean_gx) : k * g[idx];
            }
          }
        }
      },
      "batchnorm2d");
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto normalized = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + kNormEpsilon);
    (*inv_std)[r] = istd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (src[j] - mu) * istd;
      (*normalized)[r * d + j] = xh;
      out[r * d + j] = gamma[j] * xh + beta[j];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, normalized, inv_std, rows, d](std::span<const double> g) {
        const auto& xh = *normalized;
        double* sx = grad_sink(x);
        double* sg = grad_sink(gamma);
        double* sb = grad_sink(beta);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* xr = xh.data() + r * d;
          double mean_h = 0.0, mean_hx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (sg) sg[j] += gr[j] * xr[j];
            if (sb) sb[j] += gr[j];
            const double h = gr[j] * gamma[j];
            mean_h += h;
            mean_hx += h * xr[j];
          }
          if (!sx) continue;
          mean_h /= static_cast<double>(d);
          mean_hx /= static_cast<double>(d);
          const double istd = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            sx[r * d + j] += istd * (gr[j] * gamma[j] - mean_h - xr[j] * mean_hx);
          }
        }
      },
      "layernorm");
}

// ---------------------------------------------------------------------------
// spatial / token plumbing

Tensor global_avg_pool2d(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Buffer out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += x[i * hw + p];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_op_result({n, c}, std::move(out), {x},
                        [x, n, c, hw](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < n * c; ++i) {
                              const double share = g[i] / static_cast<double>(hw);
                              for (std::size_t p = 0; p < hw; ++p) s[i * hw + p] += share;
                            }
                          }
                        },
                        "global_avg_pool2d");
}

Tensor mean_tokens(const Tensor& x) {
  require_rank(x, 3, "mean_tokens");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  Buffer out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < t; ++k) {
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * t + k) * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= static_cast<double>(t);
  }
  return make_op_result({n, d}, std::move(out), {x},
                        [x, n, t, d](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t k = 0; k < t; ++k) {
                                for (std::size_t j = 0; j < d; ++j) {
                                  s[(i * t + k) * d + j] += g[i * d + j] / static_cast<double>(t);
                                }
                              }
                            }
                          }
                        },
                        "mean_tokens");
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  require_rank(images, 4, "patchify");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_str(images.shape()) +
                         " not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, feat = c * patch * patch;
  // index map: out flat -> image flat
  auto index = std::make_shared<std::vector<std::size_t>>(images.numel());
  auto& idx = *index;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        const std::size_t tok = (i * gh + py) * gw + px;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t dy = 0; dy < patch; ++dy) {
            for (std::size_t dx = 0; dx < patch; ++dx) {
              idx[tok * feat + (ch * patch + dy) * patch + dx] =
                  ((i * c + ch) * h + py * patch + dy) * w + px * patch + dx;
            }
          }
        }
      }
    }
  }
  Buffer out(images.numel());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = images[idx[k]];
  return make_op_result({n, gh * gw, feat}, std::move(out), {images},
                        [images, index](std::span<const double> g) {
                          if (double* s = grad_sink(images)) {
                            const auto& idx = *index;
                            for (std::size_t k = 0; k < g.size(); ++k) s[idx[k]] += g[k];
                          }
                        },
                        "patchify");
}

Tensor append_token(const Tensor& x, const Tensor& token) {
  require_rank(x, 3, "append_token");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (token.numel() != d) {
    throw DimensionError("append_token: token " + shape_str(token.shape()) + " for tokens " +
                         shape_str(x.shape()));
  }
  Buffer out(n * (t + 1) * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + i * t * d, t * d, out.data() + i * (t + 1) * d);
    std::copy_n(token.data().data(), d, out.data() + (i * (t + 1) + t) * d);
  }
  return make_op_result({n, t + 1, d}, std::move(out), {x, token},
                        [x, token, n, t, d](std::span<const double> g) {
                          double* sx = grad_sink(x);
                          double* st = grad_sink(token);
                          for (std::size_t i = 0; i < n; ++i) {
                            const double* gi = g.data() + i * (t + 1) * d;
                            if (sx) {
                              for (std::size_t k = 0; k < t * d; ++k) sx[i * t * d + k] += gi[k];
                            }
                            if (st) {
                              for (std::size_t j = 0; j < d; ++j) st[j] += gi[t * d + j];
                            }
                          }
                        },
                        "append_token");
}

Tensor select_token(const Tensor& x, std::size_t index) {
  require_rank(x, 3, "select_token");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (index >= t) {
    throw DimensionError("select_token: index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
  }
  Buffer out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + (i * t + index) * d, d, out.data() + i * d);
  }
  return make_op_result({n, d}, std::move(out), {x},
                        [x, index, n, t, d](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < d; ++j) {
                                s[(i * t + index) * d + j] += g[i * d + j];
                              }
                            }
                          }
                        },
                        "select_token");
}

Tensor split_heads(const Tensor& qkv, std::size_t part, std::size_t heads) {
  require_rank(qkv, 3, "split_heads");
  const std::size_t n = qkv.dim(0), t = qkv.dim(1), d3 = qkv.dim(2);
  if (part > 2 || d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(qkv.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t d = d3 / 3, dh = d / heads;
  auto map = [=](std::size_t b, std::size_t hh, std::size_t i, std::size_t j) {
    return (b * t + i) * d3 + part * d + hh * dh + j;
  };
  Buffer out(n * t * d);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < dh; ++j)
          out[((b * heads + hh) * t + i) * dh + j] = qkv[map(b, hh, i, j)];
  return make_op_result({n * heads, t, dh}, std::move(out), {qkv},
                        [qkv, map, n, heads, t, dh](std::span<const double> g) {
                          if (double* s = grad_sink(qkv)) {
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t hh = 0; hh < heads; ++hh)
                                for (std::size_t i = 0; i < t; ++i)
                                  for (std::size_t j = 0; j < dh; ++j)
                                    s[map(b, hh, i, j)] += g[((b * heads + hh) * t + i) * dh + j];
                          }
                        },
                        "split_heads");
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: leading extent of " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(heads));
  }
  const std::size_t n = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), d = heads * dh;
  Buffer out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < dh; ++j)
          out[(b * t + i) * d + hh * dh + j] = x[((b * heads + hh) * t + i) * dh + j];
  return make_op_result({n, t, d}, std::move(out), {x},
                        [x, n, heads, t, dh, d](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t hh = 0; hh < heads; ++hh)
                                for (std::size_t i = 0; i < t; ++i)
                                  for (std::size_t j = 0; j < dh; ++j)
                                    s[((b * heads + hh) * t + i) * dh + j] +=
                                        g[(b * t + i) * d + hh * dh + j];
                          }
                        },
                        "merge_heads");
}

Tensor merge_patches(const Tensor& x, std::size_t grid_h, std::size_t grid_w) {
  require_rank(x, 3, "merge_patches");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (grid_h * grid_w != t || grid_h % 2 != 0 || grid_w % 2 != 0) {
    throw DimensionError("merge_patches: " + std::to_string(t) + " tokens do not form an even " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  const std::size_t oh = grid_h / 2, ow = grid_w / 2;
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  auto& idx = *index;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t qy = 0; qy < oh; ++qy)
      for (std::size_t qx = 0; qx < ow; ++qx)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            for (std::size_t k = 0; k < d; ++k)
              idx[((i * oh + qy) * ow + qx) * 4 * d + (dy * 2 + dx) * d + k] =
                  (i * t + (2 * qy + dy) * grid_w + 2 * qx + dx) * d + k;
  Buffer out(x.numel());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[idx[k]];
  return make_op_result({n, oh * ow, 4 * d}, std::move(out), {x},
                        [x, index](std::span<const double> g) {
                          if (double* s = grad_sink(x)) {
                            const auto& idx = *index;
                            for (std::size_t k = 0; k < g.size(); ++k) s[idx[k]] += g[k];
                          }
                        },
                        "merge_patches");
}

}  // namespace kdlab
