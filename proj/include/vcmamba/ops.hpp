#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "vcmamba/tensor.hpp"

#ifdef VCM_USE_EIGEN
#include <Eigen/Core>
#endif

namespace vcm {

enum class Mode { Train, Eval };

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

template <typename T>
using NodeP = std::shared_ptr<Node<T>>;

template <typename T>
bool wants_grad(const NodeP<T>& n) {
  return n && n->requires_grad;
}

#ifdef VCM_USE_EIGEN
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMat<T>>;
template <typename T>
using View = Eigen::Map<RowMat<T>>;
#endif

// Row-major GEMM kernels accumulating into C. With VCM_USE_EIGEN they go
// through Eigen's blocked product; otherwise plain loops.

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
#ifdef VCM_USE_EIGEN
  if (m && n && k) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
               K = static_cast<Eigen::Index>(k);
    View<T>(c, M, N).noalias() += ConstView<T>(a, M, K) * ConstView<T>(b, K, N);
    return;
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
#ifdef VCM_USE_EIGEN
  if (m && n && k) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
               K = static_cast<Eigen::Index>(k);
    View<T>(c, M, N).noalias() += ConstView<T>(a, M, K) * ConstView<T>(b, N, K).transpose();
    return;
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
#ifdef VCM_USE_EIGEN
  if (m && n && k) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
               K = static_cast<Eigen::Index>(k);
    View<T>(c, M, N).noalias() += ConstView<T>(a, K, M).transpose() * ConstView<T>(b, K, N);
    return;
  }
#endif
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t cin, h, w, kh, kw, stride, pad, oh, ow;

  bool pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad == 0;
  }
};

inline ConvGeometry conv_geometry(std::size_t cin, std::size_t h,
                                  std::size_t w, std::size_t kh,
                                  std::size_t kw, std::size_t stride,
                                  std::size_t pad, const std::string& what) {
  if (stride == 0) throw ShapeError(what + ": stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw ShapeError(what + ": kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " does not fit padded input " +
                     std::to_string(h + 2 * pad) + "x" +
                     std::to_string(w + 2 * pad));
  }
  return {cin,
          h,
          w,
          kh,
          kw,
          stride,
          pad,
          (h + 2 * pad - kh) / stride + 1,
          (w + 2 * pad - kw) / stride + 1};
}

// col[(c,i,j), (oy,ox)] for one image.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) -
                          static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) -
                            static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 &&
                                iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            dst[oy * g.ow + ox] =
                inside ? x[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) -
                          static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) -
                            static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += src[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x},
                        [xn, df](Node<T>& self) {
                          if (!wants_grad(xn)) return;
                          auto& gx = xn->grad;
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += self.grad[i] * df(xn->data[i]);
                          }
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!same_shape(a, b)) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [an, bn](Node<T>& self) {
                          for (const auto& n : {an, bn}) {
                            if (!detail::wants_grad(n)) continue;
                            for (std::size_t i = 0; i < n->grad.size(); ++i) {
                              n->grad[i] += self.grad[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!same_shape(a, b)) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (detail::wants_grad(an)) {
          for (std::size_t i = 0; i < an->grad.size(); ++i) {
            an->grad[i] += self.grad[i] * bn->data[i];
          }
        }
        if (detail::wants_grad(bn)) {
          for (std::size_t i = 0; i < bn->grad.size(); ++i) {
            bn->grad[i] += self.grad[i] * an->data[i];
          }
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x},
                        [xn, factor](Node<T>& self) {
                          if (!detail::wants_grad(xn)) return;
                          for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                            xn->grad[i] += self.grad[i] * factor;
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  auto xn = x.node();
  return make_result<T>({1}, {acc}, {x}, [xn](Node<T>& self) {
    if (!detail::wants_grad(xn)) return;
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  auto xn = x.node();
  return make_result<T>(std::move(shape), x.node()->data, {x},
                        [xn](Node<T>& self) {
                          if (!detail::wants_grad(xn)) return;
                          for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                            xn->grad[i] += self.grad[i];
                          }
                        });
}

// x[B, C, ...] + bias[C]
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.numel() != x.dim(1)) {
    throw ShapeError("add_channel_bias: input " + shape_str(x.shape()) +
                     " incompatible with bias " + shape_str(bias.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        out[base + i] = x[base + i] + bias[c];
      }
    }
  }
  auto xn = x.node(), bn = bias.node();
  return make_result<T>(
      x.shape(), std::move(out), {x, bias},
      [xn, bn, batch, channels, inner](Node<T>& self) {
        if (detail::wants_grad(xn)) {
          for (std::size_t i = 0; i < xn->grad.size(); ++i) {
            xn->grad[i] += self.grad[i];
          }
        }
        if (detail::wants_grad(bn)) {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (b * channels + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                bn->grad[c] += self.grad[base + i];
              }
            }
          }
        }
      });
}

// x[B, ...rest] + y[...rest], y shared across the batch.
template <typename T>
Tensor<T> add_batch_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != y.rank() + 1 ||
      !std::equal(y.shape().begin(), y.shape().end(), x.shape().begin() + 1)) {
    throw ShapeError("add_batch_broadcast: " + shape_str(x.shape()) +
                     " cannot take " + shape_str(y.shape()));
  }
  const std::size_t batch = x.dim(0), inner = y.numel();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      out[b * inner + i] = x[b * inner + i] + y[i];
    }
  }
  auto xn = x.node(), yn = y.node();
  return make_result<T>(x.shape(), std::move(out), {x, y},
                        [xn, yn, batch, inner](Node<T>& self) {
                          if (detail::wants_grad(xn)) {
                            for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                              xn->grad[i] += self.grad[i];
                            }
                          }
                          if (detail::wants_grad(yn)) {
                            for (std::size_t b = 0; b < batch; ++b) {
                              for (std::size_t i = 0; i < inner; ++i) {
                                yn->grad[i] += self.grad[b * inner + i];
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T sigmoid_value(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                   : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
T softplus_value(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * sigmoid_value(v); },
      [](T v) {
        const T s = sigmoid_value(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return softplus_value(v); },
      [](T v) { return sigmoid_value(v); });
}

// Exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
      },
      [](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) /
                      std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------------------
// Convolutions and dense layers

// Cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) +
                     " has " + std::to_string(input.dim(1)) +
                     " channels but weight " + shape_str(weight.shape()) +
                     " expects " + std::to_string(weight.dim(1)));
  }
  const std::size_t batch = input.dim(0), cout = weight.dim(0);
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) +
                     " output channels");
  }
  const auto g = detail::conv_geometry(input.dim(1), input.dim(2),
                                       input.dim(3), weight.dim(2),
                                       weight.dim(3), stride, padding,
                                       "conv2d");
  const std::size_t kdim = g.cin * g.kh * g.kw, p = g.oh * g.ow;
  const std::size_t in_stride = g.cin * g.h * g.w;
  std::vector<T> out(batch * cout * p, T(0));
  std::vector<T> col(g.pointwise() ? 0 : kdim * p);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = input.data() + b * in_stride;
    T* y = out.data() + b * cout * p;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) {
        std::fill(y + o * p, y + (o + 1) * p, bias[o]);
      }
    }
    if (g.pointwise()) {
      detail::gemm_nn(cout, p, kdim, weight.data(), x, y);
    } else {
      detail::im2col(x, g, col.data());
      detail::gemm_nn(cout, p, kdim, weight.data(), col.data(), y);
    }
  }
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      {batch, cout, g.oh, g.ow}, std::move(out), {input, weight, bias},
      [xn, wn, bn, g, batch, cout, kdim, p, in_stride](Node<T>& self) {
        std::vector<T> col(g.pointwise() ? 0 : kdim * p);
        std::vector<T> dcol(g.pointwise() ? 0 : kdim * p);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* dy = self.grad.data() + b * cout * p;
          const T* x = xn->data.data() + b * in_stride;
          if (detail::wants_grad(bn)) {
            for (std::size_t o = 0; o < cout; ++o) {
              T acc = T(0);
              for (std::size_t i = 0; i < p; ++i) acc += dy[o * p + i];
              bn->grad[o] += acc;
            }
          }
          if (g.pointwise()) {
            if (detail::wants_grad(wn)) {
              detail::gemm_nt(cout, kdim, p, dy, x, wn->grad.data());
            }
            if (detail::wants_grad(xn)) {
              detail::gemm_tn(kdim, p, cout, wn->data.data(), dy,
                              xn->grad.data() + b * in_stride);
            }
          } else {
            if (detail::wants_grad(wn)) {
              detail::im2col(x, g, col.data());
              detail::gemm_nt(cout, kdim, p, dy, col.data(), wn->grad.data());
            }
            if (detail::wants_grad(xn)) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::gemm_tn(kdim, p, cout, wn->data.data(), dy, dcol.data());
              detail::col2im_add(dcol.data(), g,
                                 xn->grad.data() + b * in_stride);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d(input, weight, Tensor<T>(), stride, padding);
}

// Per-channel filtering. input [B,C,H,W], weight [C,1,kh,kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding) {
  require_rank(input, 4, "depthwise_conv2d input");
  require_rank(weight, 4, "depthwise_conv2d weight");
  if (weight.dim(0) != input.dim(1) || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: input " + shape_str(input.shape()) +
                     " incompatible with weight " +
                     shape_str(weight.shape()) + " (expected [" +
                     std::to_string(input.dim(1)) + ",1,kh,kw])");
  }
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  if (bias.defined() && bias.numel() != channels) {
    throw ShapeError("depthwise_conv2d: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(channels) +
                     " channels");
  }
  const auto g = detail::conv_geometry(1, input.dim(2), input.dim(3),
                                       weight.dim(2), weight.dim(3), stride,
                                       padding, "depthwise_conv2d");
  const std::size_t hw = g.h * g.w, p = g.oh * g.ow, kk = g.kh * g.kw;
  std::vector<T> out(batch * channels * p);
  auto for_each_tap = [g](auto&& fn) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t i = 0; i < g.kh; ++i) {
        const long iy = static_cast<long>(oy * g.stride + i) -
                        static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = static_cast<long>(ox * g.stride + j) -
                            static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            fn(oy * g.ow + ox, i * g.kw + j,
               static_cast<std::size_t>(iy) * g.w +
                   static_cast<std::size_t>(ix));
          }
        }
      }
    }
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* x = input.data() + (b * channels + c) * hw;
      const T* w = weight.data() + c * kk;
      T* y = out.data() + (b * channels + c) * p;
      std::fill(y, y + p, bias.defined() ? bias[c] : T(0));
      for_each_tap([&](std::size_t o, std::size_t k, std::size_t src) {
        y[o] += w[k] * x[src];
      });
    }
  }
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      {batch, channels, g.oh, g.ow}, std::move(out), {input, weight, bias},
      [xn, wn, bn, batch, channels, hw, p, kk, for_each_tap](Node<T>& self) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const T* dy = self.grad.data() + (b * channels + c) * p;
            const T* x = xn->data.data() + (b * channels + c) * hw;
            const T* w = wn->data.data() + c * kk;
            if (detail::wants_grad(bn)) {
              T acc = T(0);
              for (std::size_t i = 0; i < p; ++i) acc += dy[i];
              bn->grad[c] += acc;
            }
            if (detail::wants_grad(wn)) {
              T* dw = wn->grad.data() + c * kk;
              for_each_tap([&](std::size_t o, std::size_t k, std::size_t src) {
                dw[k] += dy[o] * x[src];
              });
            }
            if (detail::wants_grad(xn)) {
              T* dx = xn->grad.data() + (b * channels + c) * hw;
              for_each_tap([&](std::size_t o, std::size_t k, std::size_t src) {
                dx[src] += dy[o] * w[k];
              });
            }
          }
        }
      });
}

// input [..., Din], weight [Dout, Din], optional bias [Dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias = Tensor<T>()) {
  require_rank(weight, 2, "linear weight");
  const std::size_t din = weight.dim(1), dout = weight.dim(0);
  if (input.rank() < 1 || input.shape().back() != din) {
    throw ShapeError("linear: input " + shape_str(input.shape()) +
                     " does not end in " + std::to_string(din) +
                     " to match weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != dout) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(dout) + " outputs");
  }
  const std::size_t rows = input.numel() / din;
  std::vector<T> out(rows * dout, T(0));
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(bias.data(), bias.data() + dout, out.data() + r * dout);
    }
  }
  detail::gemm_nt(rows, dout, din, input.data(), weight.data(), out.data());
  Shape shape = input.shape();
  shape.back() = dout;
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      std::move(shape), std::move(out), {input, weight, bias},
      [xn, wn, bn, rows, din, dout](Node<T>& self) {
        const T* dy = self.grad.data();
        if (detail::wants_grad(bn)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < dout; ++o) {
              bn->grad[o] += dy[r * dout + o];
            }
          }
        }
        if (detail::wants_grad(wn)) {
          detail::gemm_tn(dout, din, rows, dy, xn->data.data(),
                          wn->grad.data());
        }
        if (detail::wants_grad(xn)) {
          detail::gemm_nn(rows, din, dout, dy, wn->data.data(),
                          xn->grad.data());
        }
      });
}

// Per-token channel projection: input [B,I,L], weight [O,I], optional bias
// [O] -> [B,O,L]. Equivalent to a 1x1 convolution over a 1D sequence.
template <typename T>
Tensor<T> channel_mix(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& bias = Tensor<T>()) {
  require_rank(input, 3, "channel_mix input");
  require_rank(weight, 2, "channel_mix weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("channel_mix: input " + shape_str(input.shape()) +
                     " has " + std::to_string(input.dim(1)) +
                     " channels but weight " + shape_str(weight.shape()) +
                     " expects " + std::to_string(weight.dim(1)));
  }
  const std::size_t batch = input.dim(0), cin = input.dim(1),
                    cout = weight.dim(0), length = input.dim(2);
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("channel_mix: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) + " outputs");
  }
  std::vector<T> out(batch * cout * length, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    T* y = out.data() + b * cout * length;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) {
        std::fill(y + o * length, y + (o + 1) * length, bias[o]);
      }
    }
    detail::gemm_nn(cout, length, cin, weight.data(),
                    input.data() + b * cin * length, y);
  }
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      {batch, cout, length}, std::move(out), {input, weight, bias},
      [xn, wn, bn, batch, cin, cout, length](Node<T>& self) {
        for (std::size_t b = 0; b < batch; ++b) {
          const T* dy = self.grad.data() + b * cout * length;
          if (detail::wants_grad(bn)) {
            for (std::size_t o = 0; o < cout; ++o) {
              for (std::size_t i = 0; i < length; ++i) {
                bn->grad[o] += dy[o * length + i];
              }
            }
          }
          if (detail::wants_grad(wn)) {
            detail::gemm_nt(cout, cin, length, dy,
                            xn->data.data() + b * cin * length,
                            wn->grad.data());
          }
          if (detail::wants_grad(xn)) {
            detail::gemm_tn(cin, length, cout, wn->data.data(), dy,
                            xn->grad.data() + b * cin * length);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats identity(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1))};
  }
};

// input [B, C, ...]; statistics over every axis except C. In train mode the
// running stats move toward the batch statistics (unbiased variance).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, RunningStats<T>& stats, Mode mode,
                     T momentum = T(kBatchNormMomentum),
                     T eps = T(kNormEpsilon)) {
  if (input.rank() < 2) {
    throw ShapeError("batch_norm: input " + shape_str(input.shape()) +
                     " needs a channel axis");
  }
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t inner = input.numel() / (batch * channels);
  const std::initializer_list<const Tensor<T>*> per_channel = {
      &gamma, &beta, &stats.mean, &stats.var};
  for (const Tensor<T>* t : per_channel) {
    if (t->numel() != channels) {
      throw ShapeError("batch_norm: per-channel tensor " +
                       shape_str(t->shape()) + " does not match " +
                       std::to_string(channels) + " channels");
    }
  }
  const std::size_t count = batch * inner;
  std::vector<T> out(input.numel()), xhat(input.numel()), invstd(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    T mu, var;
    if (mode == Mode::Train) {
      T acc = T(0);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) acc += x[i];
      }
      mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) sq += (x[i] - mu) * (x[i] - mu);
      }
      var = sq / static_cast<T>(count);
      const T unbiased =
          count > 1 ? sq / static_cast<T>(count - 1) : var;
      stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mu;
      stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * unbiased;
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    invstd[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (input[base + i] - mu) * invstd[c];
        out[base + i] = gamma[c] * xhat[base + i] + beta[c];
      }
    }
  }
  auto xn = input.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [xn, gn, bn, mode, batch, channels, inner, count,
       xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
        const T* dy = self.grad.data();
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += dy[base + i] * xhat[base + i];
            }
          }
          if (detail::wants_grad(gn)) gn->grad[c] += sum_dy_xhat;
          if (detail::wants_grad(bn)) bn->grad[c] += sum_dy;
          if (!detail::wants_grad(xn)) continue;
          const T g = gn->data[c];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              if (mode == Mode::Train) {
                xn->grad[base + i] +=
                    g * invstd[c] / n *
                    (n * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
              } else {
                xn->grad[base + i] += g * invstd[c] * dy[base + i];
              }
            }
          }
        }
      });
}

// Normalizes over one axis (default: last). gamma/beta have that axis' extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int axis = -1,
                     T eps = T(kNormEpsilon)) {
  const int rank = static_cast<int>(input.rank());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) {
    throw ShapeError("layer_norm: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(static_cast<std::size_t>(ax));
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) +
                     "/" + shape_str(beta.shape()) + " do not match extent " +
                     std::to_string(n));
  }
  std::size_t inner = 1;
  for (int i = ax + 1; i < rank; ++i) inner *= input.dim(static_cast<std::size_t>(i));
  const std::size_t outer = input.numel() / (n * inner);
  std::vector<T> out(input.numel()), xhat(input.numel()),
      invstd(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T acc = T(0);
      for (std::size_t k = 0; k < n; ++k) acc += input[base + k * inner];
      const T mu = acc / static_cast<T>(n);
      T sq = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T d = input[base + k * inner] - mu;
        sq += d * d;
      }
      const T is = T(1) / std::sqrt(sq / static_cast<T>(n) + eps);
      invstd[o * inner + in] = is;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = base + k * inner;
        xhat[idx] = (input[idx] - mu) * is;
        out[idx] = gamma[k] * xhat[idx] + beta[k];
      }
    }
  }
  auto xn = input.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [xn, gn, bn, n, inner, outer, xhat = std::move(xhat),
       invstd = std::move(invstd)](Node<T>& self) {
        const T* dy = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T sum_d = T(0), sum_d_xhat = T(0);
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t idx = base + k * inner;
              if (detail::wants_grad(gn)) gn->grad[k] += dy[idx] * xhat[idx];
              if (detail::wants_grad(bn)) bn->grad[k] += dy[idx];
              const T d = dy[idx] * gn->data[k];
              sum_d += d;
              sum_d_xhat += d * xhat[idx];
            }
            if (!detail::wants_grad(xn)) continue;
            const T is = invstd[o * inner + in];
            const T nn = static_cast<T>(n);
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t idx = base + k * inner;
              const T d = dy[idx] * gn->data[k];
              xn->grad[idx] += is / nn * (nn * d - sum_d - xhat[idx] * sum_d_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and loss

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input, 4, "global_avg_pool input");
  const std::size_t rows = input.dim(0) * input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += input[r * hw + i];
    out[r] = acc / static_cast<T>(hw);
  }
  auto xn = input.node();
  return make_result<T>({input.dim(0), input.dim(1)}, std::move(out), {input},
                        [xn, rows, hw](Node<T>& self) {
                          if (!detail::wants_grad(xn)) return;
                          const T inv = T(1) / static_cast<T>(hw);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t i = 0; i < hw; ++i) {
                              xn->grad[r * hw + i] += self.grad[r] * inv;
                            }
                          }
                        });
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  std::vector<T> probs(logits.numel());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ShapeError("softmax_cross_entropy: label " +
                       std::to_string(label) + " outside 0.." +
                       std::to_string(classes - 1));
    }
    const T* z = logits.data() + b * classes;
    const T zmax = *std::max_element(z, z + classes);
    T denom = T(0);
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(z[k] - zmax);
    const T log_denom = std::log(denom);
    for (std::size_t k = 0; k < classes; ++k) {
      probs[b * classes + k] = std::exp(z[k] - zmax - log_denom);
    }
    loss += -(z[label] - zmax - log_denom);
  }
  loss /= static_cast<T>(batch);
  auto xn = logits.node();
  std::vector<int> owned(labels.begin(), labels.end());
  return make_result<T>(
      {1}, {loss}, {logits},
      [xn, batch, classes, probs = std::move(probs),
       owned = std::move(owned)](Node<T>& self) {
        if (!detail::wants_grad(xn)) return;
        const T g = self.grad[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t k = 0; k < classes; ++k) {
            const T target =
                static_cast<std::size_t>(owned[b]) == k ? T(1) : T(0);
            xn->grad[b * classes + k] += g * (probs[b * classes + k] - target);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling

// table [D,H0,W0] -> [D,H,W], bilinear with half-pixel centers and edge clamp.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& table, std::size_t height,
                          std::size_t width) {
  require_rank(table, 3, "bilinear_resize table");
  if (height == 0 || width == 0) {
    throw ShapeError("bilinear_resize: target grid must be non-empty");
  }
  const std::size_t depth = table.dim(0), h0 = table.dim(1), w0 = table.dim(2);
  struct Tap {
    std::size_t lo, hi;
    T frac;
  };
  auto taps = [](std::size_t src, std::size_t dst) {
    std::vector<Tap> out(dst);
    const T ratio = static_cast<T>(src) / static_cast<T>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
      T pos = (static_cast<T>(i) + T(0.5)) * ratio - T(0.5);
      pos = std::clamp(pos, T(0), static_cast<T>(src - 1));
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, src - 1);
      out[i] = {lo, hi, pos - static_cast<T>(lo)};
    }
    return out;
  };
  if (h0 == height && w0 == width) {
    return reshape(table, table.shape());
  }
  const auto ty = taps(h0, height), tx = taps(w0, width);
  std::vector<T> out(depth * height * width);
  for (std::size_t d = 0; d < depth; ++d) {
    const T* src = table.data() + d * h0 * w0;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const auto& a = ty[y];
        const auto& b = tx[x];
        const T top = src[a.lo * w0 + b.lo] * (T(1) - b.frac) +
                      src[a.lo * w0 + b.hi] * b.frac;
        const T bottom = src[a.hi * w0 + b.lo] * (T(1) - b.frac) +
                         src[a.hi * w0 + b.hi] * b.frac;
        out[(d * height + y) * width + x] = top * (T(1) - a.frac) + bottom * a.frac;
      }
    }
  }
  auto tn = table.node();
  return make_result<T>(
      {depth, height, width}, std::move(out), {table},
      [tn, depth, h0, w0, height, width, ty, tx](Node<T>& self) {
        if (!detail::wants_grad(tn)) return;
        for (std::size_t d = 0; d < depth; ++d) {
          T* g = tn->grad.data() + d * h0 * w0;
          for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
              const T dy = self.grad[(d * height + y) * width + x];
              const auto& a = ty[y];
              const auto& b = tx[x];
              g[a.lo * w0 + b.lo] += dy * (T(1) - a.frac) * (T(1) - b.frac);
              g[a.lo * w0 + b.hi] += dy * (T(1) - a.frac) * b.frac;
              g[a.hi * w0 + b.lo] += dy * a.frac * (T(1) - b.frac);
              g[a.hi * w0 + b.hi] += dy * a.frac * b.frac;
            }
          }
        }
      });
}

}  // namespace vcm
