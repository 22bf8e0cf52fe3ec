#pragma once

// Layer operations, forward + reverse-mode backward. GEMM-shaped inner loops
// run through Eigen; everything else is explicit so the gradient math stays
// auditable. Every backward here is covered by finite-difference checks in
// the test suite.

#include <Eigen/Dense>

#include <cstring>
#include <memory>
#include <vector>

#include "signseq/common.hpp"
#include "signseq/mask.hpp"
#include "signseq/tensor.hpp"

namespace signseq {

enum class Mode { train, infer };

enum class Act { relu, sigmoid, tanh, softmax };

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// dense: y = xW + b over the last axis; leading axes are flattened
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b = Tensor<T>()) {
  if (x.rank() < 1 || W.rank() != 2)
    throw ShapeError("dense: need x rank>=1 and weight rank 2, got " + shape_str(x.shape()) +
                     " and " + shape_str(W.shape()));
  const std::size_t in = x.dim(x.rank() - 1);
  const std::size_t out = W.dim(1);
  if (W.dim(0) != in)
    throw ShapeError("dense: inner extents disagree, x " + shape_str(x.shape()) + " vs W " +
                     shape_str(W.shape()));
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != out))
    throw ShapeError("dense: bias " + shape_str(b.shape()) + " does not match output width " +
                     std::to_string(out));
  const std::size_t rows = x.size() / in;

  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor<T> y(out_shape);

  detail::CMapM<T> xm(x.data().data(), rows, in);
  detail::CMapM<T> wm(W.data().data(), in, out);
  detail::MapM<T> ym(y.data().data(), rows, out);
  ym.noalias() = xm * wm;
  if (has_bias) {
    Eigen::Map<const Eigen::RowVectorX<T>> bv(b.data().data(), out);
    ym.rowwise() += bv;
  }

  if (detail::recording<T>({&x, &W, &b})) {
    auto xn = x.node(), wn = W.node(), bn = has_bias ? b.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    detail::attach(y, std::move(parents), [xn, wn, bn, rows, in, out](detail::Node<T>& self) {
      detail::CMapM<T> gy(self.grad.data(), rows, out);
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::MapM<T> gx(xn->grad.data(), rows, in);
        detail::CMapM<T> wm2(wn->data.data(), in, out);
        gx.noalias() += gy * wm2.transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::MapM<T> gw(wn->grad.data(), in, out);
        detail::CMapM<T> xm2(xn->data.data(), rows, in);
        gw.noalias() += xm2.transpose() * gy;
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        Eigen::Map<Eigen::RowVectorX<T>> gb(bn->grad.data(), out);
        gb += gy.colwise().sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = x(i) > T(0) ? x(i) : T(0);
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    detail::attach(y, {xn}, [xn](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xn->data[i] > T(0)) xn->grad[i] += self.grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = detail::stable_sigmoid(x(i));
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    // self.data is the op's own output; capturing the node would cycle
    detail::attach(y, {xn}, [xn](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = self.data[i];
        xn->grad[i] += self.grad[i] * s * (T(1) - s);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = std::tanh(x(i));
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    detail::attach(y, {xn}, [xn](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T t = self.data[i];
        xn->grad[i] += self.grad[i] * (T(1) - t * t);
      }
    });
  }
  return y;
}

// softmax over the last axis; rows come out strictly positive, summing to 1
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1)
    throw ShapeError("softmax: last extent must be >= 1, got " + shape_str(x.shape()));
  const std::size_t cols = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / cols;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T* yr = y.data().data() + r * cols;
    T m = xr[0];
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - m);
      s += yr[c];
    }
    const T inv = T(1) / s;
    for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    detail::attach(y, {xn}, [xn, rows, cols](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = self.data.data() + r * cols;
        const T* gr = self.grad.data() + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
        T* gx = xn->grad.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gx[c] += yr[c] * (gr[c] - dot);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  switch (kind) {
    case Act::relu: return relu(x);
    case Act::sigmoid: return sigmoid(x);
    case Act::tanh: return tanh_act(x);
    case Act::softmax: return softmax_last(x);
  }
  throw ConfigError("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// layer norm over the channel (last) axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  const std::size_t ch = x.dim(x.rank() - 1);
  if (gamma.size() != ch || beta.size() != ch)
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(ch) + " channels");
  if (eps <= 0) throw ConfigError("layer_norm: eps must be > 0");
  const std::size_t rows = x.size() / ch;
  Tensor<T> y(x.shape());

  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * ch;
    T mean = T(0);
    for (std::size_t c = 0; c < ch; ++c) mean += xr[c];
    mean /= static_cast<T>(ch);
    T var = T(0);
    for (std::size_t c = 0; c < ch; ++c) {
      const T d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(ch);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = inv;
    T* yr = y.data().data() + r * ch;
    T* hr = xhat->data() + r * ch;
    for (std::size_t c = 0; c < ch; ++c) {
      hr[c] = (xr[c] - mean) * inv;
      yr[c] = hr[c] * gamma(c) + beta(c);
    }
  }

  if (detail::recording<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    detail::attach(y, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, rows, ch](detail::Node<T>& self) {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = self.grad.data() + r * ch;
        const T* hr = xhat->data() + r * ch;
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t c = 0; c < ch; ++c) {
            if (gn->requires_grad) gn->grad[c] += gr[c] * hr[c];
            if (bn->requires_grad) bn->grad[c] += gr[c];
          }
        }
        if (xn->requires_grad) {
          // dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
          T sum_dh = T(0), sum_dh_h = T(0);
          for (std::size_t c = 0; c < ch; ++c) {
            const T dh = gr[c] * gn->data[c];
            sum_dh += dh;
            sum_dh_h += dh * hr[c];
          }
          const T invn = T(1) / static_cast<T>(ch);
          const T inv = (*inv_std)[r];
          T* gx = xn->grad.data() + r * ch;
          for (std::size_t c = 0; c < ch; ++c) {
            const T dh = gr[c] * gn->data[c];
            gx[c] += inv * (dh - sum_dh * invn - hr[c] * (sum_dh_h * invn));
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// masked batch norm over (batch, valid frames) per channel
// ---------------------------------------------------------------------------

// Train mode uses statistics over valid frames only and folds them into the
// running buffers in place; infer mode normalizes with the running buffers.
// All positions (padded included) are normalized and affine-transformed.
template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        Tensor<T>& running_mean, Tensor<T>& running_var,
                        const SequenceMask& mask, Mode mode, double momentum = 0.99,
                        double eps = 1e-3) {
  if (x.rank() != 3)
    throw ShapeError("batch_norm_1d: expected [batch, seq, ch], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  if (mask.batch() != B || mask.max_len() != S)
    throw ShapeError("batch_norm_1d: mask " + std::to_string(mask.batch()) + "x" +
                     std::to_string(mask.max_len()) + " does not match input " +
                     shape_str(x.shape()));
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
      running_var.size() != C)
    throw ShapeError("batch_norm_1d: parameter width must equal channel count " +
                     std::to_string(C));

  Tensor<T> y(x.shape());
  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto inv_std = std::make_shared<std::vector<T>>(C, T(0));
  const std::size_t n_valid = mask.total_valid();

  if (mode == Mode::train) {
    if (n_valid == 0) throw DataError("batch_norm_1d: batch has no valid frames");
    std::vector<T> var(C, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < mask.valid_len(b); ++t) {
        const T* xr = x.data().data() + (b * S + t) * C;
        for (std::size_t c = 0; c < C; ++c) (*mean)[c] += xr[c];
      }
    for (std::size_t c = 0; c < C; ++c) (*mean)[c] /= static_cast<T>(n_valid);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < mask.valid_len(b); ++t) {
        const T* xr = x.data().data() + (b * S + t) * C;
        for (std::size_t c = 0; c < C; ++c) {
          const T d = xr[c] - (*mean)[c];
          var[c] += d * d;
        }
      }
    for (std::size_t c = 0; c < C; ++c) {
      var[c] /= static_cast<T>(n_valid);
      (*inv_std)[c] = T(1) / std::sqrt(var[c] + static_cast<T>(eps));
    }
    // momentum update of the running buffers (biased batch variance)
    const T mom = static_cast<T>(momentum);
    for (std::size_t c = 0; c < C; ++c) {
      running_mean(c) = mom * running_mean(c) + (T(1) - mom) * (*mean)[c];
      running_var(c) = mom * running_var(c) + (T(1) - mom) * var[c];
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = running_mean(c);
      (*inv_std)[c] = T(1) / std::sqrt(running_var(c) + static_cast<T>(eps));
    }
  }

  for (std::size_t r = 0; r < B * S; ++r) {
    const T* xr = x.data().data() + r * C;
    T* yr = y.data().data() + r * C;
    for (std::size_t c = 0; c < C; ++c)
      yr[c] = ((xr[c] - (*mean)[c]) * (*inv_std)[c]) * gamma(c) + beta(c);
  }

  if (detail::recording<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    const bool train = mode == Mode::train;
    auto lens = mask.valid_lens();
    detail::attach(
        y, {xn, gn, bn},
        [xn, gn, bn, mean, inv_std, lens, train, n_valid, B, S, C](detail::Node<T>& self) {
          if (gn->requires_grad) gn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          if (gn->requires_grad || bn->requires_grad) {
            for (std::size_t r = 0; r < B * S; ++r) {
              const T* gr = self.grad.data() + r * C;
              const T* xr = xn->data.data() + r * C;
              for (std::size_t c = 0; c < C; ++c) {
                if (gn->requires_grad)
                  gn->grad[c] += gr[c] * (xr[c] - (*mean)[c]) * (*inv_std)[c];
                if (bn->requires_grad) bn->grad[c] += gr[c];
              }
            }
          }
          if (!xn->requires_grad) return;
          xn->ensure_grad();
          if (!train) {
            for (std::size_t r = 0; r < B * S; ++r) {
              const T* gr = self.grad.data() + r * C;
              T* gx = xn->grad.data() + r * C;
              for (std::size_t c = 0; c < C; ++c) gx[c] += gr[c] * gn->data[c] * (*inv_std)[c];
            }
            return;
          }
          // A_c = sum_all dxhat, B_c = sum_all dxhat * (x - mean); the stat
          // terms flow back into valid positions only.
          std::vector<T> sum_dh(C, T(0)), sum_dh_xc(C, T(0));
          for (std::size_t r = 0; r < B * S; ++r) {
            const T* gr = self.grad.data() + r * C;
            const T* xr = xn->data.data() + r * C;
            for (std::size_t c = 0; c < C; ++c) {
              const T dh = gr[c] * gn->data[c];
              sum_dh[c] += dh;
              sum_dh_xc[c] += dh * (xr[c] - (*mean)[c]);
            }
          }
          const T invN = T(1) / static_cast<T>(n_valid);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < S; ++t) {
              const std::size_t r = b * S + t;
              const bool valid = t < lens[b];
              const T* gr = self.grad.data() + r * C;
              const T* xr = xn->data.data() + r * C;
              T* gx = xn->grad.data() + r * C;
              for (std::size_t c = 0; c < C; ++c) {
                const T inv = (*inv_std)[c];
                T g = gr[c] * gn->data[c] * inv;
                if (valid) {
                  g -= inv * invN * sum_dh[c];
                  g -= inv * inv * inv * invN * (xr[c] - (*mean)[c]) * sum_dh_xc[c];
                }
                gx[c] += g;
              }
            }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// inverted dropout; identity in infer mode
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::infer || rate == 0) return x;
  RngStream rng(seed);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
  const T scale = T(1) / static_cast<T>(1.0 - rate);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool k = !(rng.uniform() < rate);
    (*keep)[i] = k;
    y(i) = k ? x(i) * scale : T(0);
  }
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    detail::attach(y, {xn}, [xn, keep, scale](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if ((*keep)[i]) xn->grad[i] += self.grad[i] * scale;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// zero padded frames of [batch, seq, ch]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mask_zero(const Tensor<T>& x, const SequenceMask& mask) {
  if (x.rank() != 3 || x.dim(0) != mask.batch() || x.dim(1) != mask.max_len())
    throw ShapeError("mask_zero: input " + shape_str(x.shape()) + " does not match mask");
  const std::size_t S = x.dim(1), C = x.dim(2);
  Tensor<T> y(x.shape());
  auto& yv = y.vec();
  const auto& xv = x.vec();
  for (std::size_t b = 0; b < mask.batch(); ++b) {
    const std::size_t len = mask.valid_len(b);
    std::memcpy(yv.data() + b * S * C, xv.data() + b * S * C, len * C * sizeof(T));
  }
  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    auto lens = mask.valid_lens();
    detail::attach(y, {xn}, [xn, lens, S, C](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < lens.size(); ++b) {
        const std::size_t base = b * S * C;
        for (std::size_t i = 0; i < lens[b] * C; ++i) xn->grad[base + i] += self.grad[base + i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// temporal convolution, "same" padding, masked
// ---------------------------------------------------------------------------

// Cross-correlation over the frame axis. Padded frames are zeroed on input
// and the corresponding output rows are zeroed again, so padding can never
// leak into valid positions.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const SequenceMask& mask) {
  if (x.rank() != 3 || kernel.rank() != 3)
    throw ShapeError("conv1d: expected x [batch, seq, ch_in] and kernel [k, ch_in, ch_out], got " +
                     shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), CI = x.dim(2);
  const std::size_t K = kernel.dim(0), CO = kernel.dim(2);
  if (kernel.dim(1) != CI)
    throw ShapeError("conv1d: kernel input channels " + std::to_string(kernel.dim(1)) +
                     " do not match x channels " + std::to_string(CI));
  if (K % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(K));
  if (mask.batch() != B || mask.max_len() != S)
    throw ShapeError("conv1d: mask does not match input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != CO)
    throw ShapeError("conv1d: bias size " + std::to_string(bias.size()) + " != ch_out " +
                     std::to_string(CO));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(K / 2);

  // masked input copy; kept for the backward pass
  auto xm = std::make_shared<NumVec<T>>(B * S * CI, T(0));
  for (std::size_t b = 0; b < B; ++b)
    std::memcpy(xm->data() + b * S * CI, x.data().data() + b * S * CI,
                mask.valid_len(b) * CI * sizeof(T));

  Tensor<T> y({B, S, CO});
  detail::MapM<T> ym(y.data().data(), B * S, CO);
  NumVec<T> shifted(B * S * CI);
  auto build_shift = [&](std::ptrdiff_t delta, NumVec<T>& dst) {
    // dst[b, s, :] = xm[b, s + delta, :] or zero out of range
    std::fill(dst.begin(), dst.end(), T(0));
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -delta));
      const std::size_t hi = static_cast<std::size_t>(
          std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(S),
                                   static_cast<std::ptrdiff_t>(S) - delta));
      if (hi <= lo) continue;
      std::memcpy(dst.data() + (b * S + lo) * CI,
                  xm->data() + (b * S + static_cast<std::size_t>(
                                            static_cast<std::ptrdiff_t>(lo) + delta)) *
                                   CI,
                  (hi - lo) * CI * sizeof(T));
    }
  };
  for (std::size_t j = 0; j < K; ++j) {
    build_shift(static_cast<std::ptrdiff_t>(j) - half, shifted);
    detail::CMapM<T> sm(shifted.data(), B * S, CI);
    detail::CMapM<T> wj(kernel.data().data() + j * CI * CO, CI, CO);
    if (j == 0)
      ym.noalias() = sm * wj;
    else
      ym.noalias() += sm * wj;
  }
  if (has_bias) {
    Eigen::Map<const Eigen::RowVectorX<T>> bv(bias.data().data(), CO);
    ym.rowwise() += bv;
  }
  // re-zero padded output rows
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = mask.valid_len(b); t < S; ++t)
      std::memset(y.data().data() + (b * S + t) * CO, 0, CO * sizeof(T));

  if (detail::recording<T>({&x, &kernel, &bias})) {
    auto xn = x.node(), kn = kernel.node();
    auto bn = has_bias ? bias.node() : nullptr;
    auto lens = mask.valid_lens();
    std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, kn};
    if (bn) parents.push_back(bn);
    detail::attach(y, std::move(parents), [xn, kn, bn, xm, lens, B, S, CI, CO, K,
                                           half](detail::Node<T>& self) {
      // grads at padded output rows are discarded: those outputs are forced 0
      NumVec<T> gy(B * S * CO, T(0));
      for (std::size_t b = 0; b < B; ++b)
        std::memcpy(gy.data() + b * S * CO, self.grad.data() + b * S * CO,
                    lens[b] * CO * sizeof(T));
      detail::CMapM<T> gym(gy.data(), B * S, CO);
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        Eigen::Map<Eigen::RowVectorX<T>> gb(bn->grad.data(), CO);
        gb += gym.colwise().sum();
      }
      NumVec<T> shifted2(B * S * CI);
      NumVec<T> gxm;
      if (xn->requires_grad) gxm.assign(B * S * CI, T(0));
      for (std::size_t j = 0; j < K; ++j) {
        const std::ptrdiff_t delta = static_cast<std::ptrdiff_t>(j) - half;
        if (kn->requires_grad) {
          std::fill(shifted2.begin(), shifted2.end(), T(0));
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -delta));
            const std::size_t hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(S), static_cast<std::ptrdiff_t>(S) - delta));
            if (hi > lo)
              std::memcpy(shifted2.data() + (b * S + lo) * CI,
                          xm->data() +
                              (b * S +
                               static_cast<std::size_t>(static_cast<std::ptrdiff_t>(lo) + delta)) *
                                  CI,
                          (hi - lo) * CI * sizeof(T));
          }
          kn->ensure_grad();
          detail::MapM<T> gk(kn->grad.data() + j * CI * CO, CI, CO);
          detail::CMapM<T> sm(shifted2.data(), B * S, CI);
          gk.noalias() += sm.transpose() * gym;
        }
        if (xn->requires_grad) {
          // dxm[b, s + delta, :] += gy[b, s, :] * Wj^T
          NumVec<T> dshift(B * S * CI);
          detail::MapM<T> dsm(dshift.data(), B * S, CI);
          detail::CMapM<T> wj(kn->data.data() + j * CI * CO, CI, CO);
          dsm.noalias() = gym * wj.transpose();
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -delta));
            const std::size_t hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(S), static_cast<std::ptrdiff_t>(S) - delta));
            for (std::size_t s = lo; s < hi; ++s) {
              const std::size_t src = (b * S + s) * CI;
              const std::size_t dst =
                  (b * S + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s) + delta)) * CI;
              for (std::size_t c = 0; c < CI; ++c) gxm[dst + c] += dshift[src + c];
            }
          }
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        // the input masking gates gradients the same way it gates values
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t base = b * S * CI;
          for (std::size_t i = 0; i < lens[b] * CI; ++i) xn->grad[base + i] += gxm[base + i];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// masked global pooling over valid frames
// ---------------------------------------------------------------------------

enum class Pool { global_avg, global_max };

template <typename T>
Tensor<T> masked_pool(const Tensor<T>& x, const SequenceMask& mask, Pool kind) {
  if (x.rank() != 3 || x.dim(0) != mask.batch() || x.dim(1) != mask.max_len())
    throw ShapeError("masked_pool: input " + shape_str(x.shape()) + " does not match mask");
  const std::size_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  for (std::size_t b = 0; b < B; ++b)
    if (mask.valid_len(b) == 0) throw DataError("masked_pool: sample with no valid frames");

  Tensor<T> y({B, C});
  std::shared_ptr<std::vector<std::size_t>> argmax;
  if (kind == Pool::global_max) argmax = std::make_shared<std::vector<std::size_t>>(B * C, 0);

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = mask.valid_len(b);
    T* yr = y.data().data() + b * C;
    if (kind == Pool::global_avg) {
      for (std::size_t t = 0; t < len; ++t) {
        const T* xr = x.data().data() + (b * S + t) * C;
        for (std::size_t c = 0; c < C; ++c) yr[c] += xr[c];
      }
      const T inv = T(1) / static_cast<T>(len);
      for (std::size_t c = 0; c < C; ++c) yr[c] *= inv;
    } else {
      for (std::size_t c = 0; c < C; ++c) yr[c] = x(b, 0, c);
      for (std::size_t t = 1; t < len; ++t) {
        const T* xr = x.data().data() + (b * S + t) * C;
        for (std::size_t c = 0; c < C; ++c)
          if (xr[c] > yr[c]) {  // strict: ties keep the earliest frame
            yr[c] = xr[c];
            (*argmax)[b * C + c] = t;
          }
      }
    }
  }

  if (detail::recording<T>({&x})) {
    auto xn = x.node();
    auto lens = mask.valid_lens();
    detail::attach(y, {xn}, [xn, lens, argmax, kind, S, C](detail::Node<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < lens.size(); ++b) {
        const T* gr = self.grad.data() + b * C;
        if (kind == Pool::global_avg) {
          const T inv = T(1) / static_cast<T>(lens[b]);
          for (std::size_t t = 0; t < lens[b]; ++t) {
            T* gx = xn->grad.data() + (b * S + t) * C;
            for (std::size_t c = 0; c < C; ++c) gx[c] += gr[c] * inv;
          }
        } else {
          for (std::size_t c = 0; c < C; ++c)
            xn->grad[(b * S + (*argmax)[b * C + c]) * C + c] += gr[c];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// ECA pieces: conv over the channel axis of a [batch, ch] descriptor, and
// per-channel rescaling of a sequence
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> channel_conv(const Tensor<T>& d, const Tensor<T>& w) {
  if (d.rank() != 2 || w.rank() != 1)
    throw ShapeError("channel_conv: expected descriptor [batch, ch] and kernel [k]");
  const std::size_t B = d.dim(0), C = d.dim(1), K = w.size();
  if (K % 2 == 0) throw ConfigError("channel_conv: kernel width must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(K / 2);
  Tensor<T> y({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t j = 0; j < K; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(c) + static_cast<std::ptrdiff_t>(j) - half;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(C))
          acc += w(j) * d(b, static_cast<std::size_t>(src));
      }
      y(b, c) = acc;
    }
  if (detail::recording<T>({&d, &w})) {
    auto dn = d.node(), wn = w.node();
    detail::attach(y, {dn, wn}, [dn, wn, B, C, K, half](detail::Node<T>& self) {
      if (dn->requires_grad) dn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const T g = self.grad[b * C + c];
          for (std::size_t j = 0; j < K; ++j) {
            const std::ptrdiff_t src =
                static_cast<std::ptrdiff_t>(c) + static_cast<std::ptrdiff_t>(j) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(C)) continue;
            if (wn->requires_grad)
              wn->grad[j] += g * dn->data[b * C + static_cast<std::size_t>(src)];
            if (dn->requires_grad)
              dn->grad[b * C + static_cast<std::size_t>(src)] += g * wn->data[j];
          }
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() != 3 || s.rank() != 2 || x.dim(0) != s.dim(0) || x.dim(2) != s.dim(1))
    throw ShapeError("scale_channels: x " + shape_str(x.shape()) + " vs scales " +
                     shape_str(s.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  Tensor<T> y(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < S; ++t) {
      const T* xr = x.data().data() + (b * S + t) * C;
      const T* sr = s.data().data() + b * C;
      T* yr = y.data().data() + (b * S + t) * C;
      for (std::size_t c = 0; c < C; ++c) yr[c] = xr[c] * sr[c];
    }
  if (detail::recording<T>({&x, &s})) {
    auto xn = x.node(), sn = s.node();
    detail::attach(y, {xn, sn}, [xn, sn, B, S, C](detail::Node<T>& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (sn->requires_grad) sn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < S; ++t) {
          const std::size_t base = (b * S + t) * C;
          for (std::size_t c = 0; c < C; ++c) {
            const T g = self.grad[base + c];
            if (xn->requires_grad) xn->grad[base + c] += g * sn->data[b * C + c];
            if (sn->requires_grad) sn->grad[b * C + c] += g * xn->data[base + c];
          }
        }
    });
  }
  return y;
}

// Efficient channel attention: sigmoid-gated per-channel rescale driven by a
// small conv over the (avg + max) pooled channel descriptor.
template <typename T>
Tensor<T> eca(const Tensor<T>& x, const Tensor<T>& conv_weights, const SequenceMask& mask) {
  Tensor<T> descriptor = add(masked_pool(x, mask, Pool::global_avg),
                             masked_pool(x, mask, Pool::global_max));
  Tensor<T> scales = sigmoid(channel_conv(descriptor, conv_weights));
  return scale_channels(x, scales);
}

// ---------------------------------------------------------------------------
// scaled dot-product multi-head self-attention with key masking
// ---------------------------------------------------------------------------

namespace detail {
// additive stand-in for -inf on padded key logits
inline constexpr double kMaskedLogitBias = -1e9;
}

template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::size_t heads, const SequenceMask& mask) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention_core: q/k/v must share a [batch, seq, d] shape");
  const std::size_t B = q.dim(0), S = q.dim(1), D = q.dim(2);
  if (heads == 0 || D % heads != 0)
    throw ConfigError("attention_core: model width " + std::to_string(D) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  if (mask.batch() != B || mask.max_len() != S)
    throw ShapeError("attention_core: mask does not match input");
  const std::size_t HD = D / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(HD));

  Tensor<T> out({B, S, D});
  auto attn = std::make_shared<NumVec<T>>(B * heads * S * S);

  for (std::size_t b = 0; b < B; ++b) {
    detail::CMapM<T> qb(q.data().data() + b * S * D, S, D);
    detail::CMapM<T> kb(k.data().data() + b * S * D, S, D);
    detail::CMapM<T> vb(v.data().data() + b * S * D, S, D);
    detail::MapM<T> ob(out.data().data() + b * S * D, S, D);
    const std::size_t len = mask.valid_len(b);
    for (std::size_t h = 0; h < heads; ++h) {
      detail::EMat<T> logits = qb.middleCols(h * HD, HD) *
                               kb.middleCols(h * HD, HD).transpose() * scale;
      for (std::size_t j = len; j < S; ++j)
        logits.col(static_cast<Eigen::Index>(j)).array() +=
            static_cast<T>(detail::kMaskedLogitBias);
      detail::MapM<T> am(attn->data() + (b * heads + h) * S * S, S, S);
      for (std::size_t i = 0; i < S; ++i) {
        const T m = logits.row(static_cast<Eigen::Index>(i)).maxCoeff();
        T sum = T(0);
        for (std::size_t j = 0; j < S; ++j) {
          const T e = std::exp(logits(static_cast<Eigen::Index>(i),
                                      static_cast<Eigen::Index>(j)) - m);
          am(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
          sum += e;
        }
        am.row(static_cast<Eigen::Index>(i)) /= sum;
      }
      ob.middleCols(h * HD, HD).noalias() = am * vb.middleCols(h * HD, HD);
    }
  }

  if (detail::recording<T>({&q, &k, &v})) {
    auto qn = q.node(), kn = k.node(), vn = v.node();
    detail::attach(out, {qn, kn, vn}, [qn, kn, vn, attn, B, S, D, HD, heads,
                                       scale](detail::Node<T>& self) {
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b) {
        detail::CMapM<T> qb(qn->data.data() + b * S * D, S, D);
        detail::CMapM<T> kb(kn->data.data() + b * S * D, S, D);
        detail::CMapM<T> vb(vn->data.data() + b * S * D, S, D);
        detail::CMapM<T> gob(self.grad.data() + b * S * D, S, D);
        for (std::size_t h = 0; h < heads; ++h) {
          detail::CMapM<T> am(attn->data() + (b * heads + h) * S * S, S, S);
          const auto gctx = gob.middleCols(h * HD, HD);
          if (vn->requires_grad) {
            detail::MapM<T> gv(vn->grad.data() + b * S * D, S, D);
            gv.middleCols(h * HD, HD).noalias() += am.transpose() * gctx;
          }
          if (qn->requires_grad || kn->requires_grad) {
            detail::EMat<T> gattn = gctx * vb.middleCols(h * HD, HD).transpose();
            // softmax backward; masked columns carry zero weight, hence zero grad
            detail::EMat<T> glogits(S, S);
            for (std::size_t i = 0; i < S; ++i) {
              const T dot = (gattn.row(static_cast<Eigen::Index>(i)).array() *
                             am.row(static_cast<Eigen::Index>(i)).array())
                                .sum();
              glogits.row(static_cast<Eigen::Index>(i)) =
                  am.row(static_cast<Eigen::Index>(i)).array() *
                  (gattn.row(static_cast<Eigen::Index>(i)).array() - dot);
            }
            if (qn->requires_grad) {
              detail::MapM<T> gq(qn->grad.data() + b * S * D, S, D);
              gq.middleCols(h * HD, HD).noalias() += glogits * kb.middleCols(h * HD, HD) * scale;
            }
            if (kn->requires_grad) {
              detail::MapM<T> gk(kn->grad.data() + b * S * D, S, D);
              gk.middleCols(h * HD, HD).noalias() +=
                  glogits.transpose() * qb.middleCols(h * HD, HD) * scale;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, std::size_t heads, const Tensor<T>& Wq, const Tensor<T>& Wk,
               const Tensor<T>& Wv, const Tensor<T>& Wo, const SequenceMask& mask) {
  Tensor<T> ctx = attention_core(dense(x, Wq), dense(x, Wk), dense(x, Wv), heads, mask);
  return dense(ctx, Wo);
}

// position-wise feed-forward: dense -> activation -> dense
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const Tensor<T>& W1, const Tensor<T>& b1, const Tensor<T>& W2,
              const Tensor<T>& b2, Act act = Act::relu) {
  return dense(activation(dense(x, W1, b1), act), W2, b2);
}

// ---------------------------------------------------------------------------
// categorical cross entropy
// ---------------------------------------------------------------------------

// Fused log-softmax form; this is what training consumes.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C)
      throw DataError("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                      std::to_string(C) + ")");
  auto probs = std::make_shared<std::vector<T>>(B * C);
  T total = T(0);
  for (std::size_t r = 0; r < B; ++r) {
    const T* lr = logits.data().data() + r * C;
    T m = lr[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, lr[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      const T e = std::exp(lr[c] - m);
      (*probs)[r * C + c] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] *= inv;
    total += (m + std::log(sum)) - lr[static_cast<std::size_t>(labels[r])];
  }
  Tensor<T> loss = Tensor<T>::scalar(total / static_cast<T>(B));

  if (detail::recording<T>({&logits})) {
    auto ln = logits.node();
    auto labs = labels;
    detail::attach(loss, {ln}, [ln, probs, labs, B, C](detail::Node<T>& self) {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const T g = self.grad[0] / static_cast<T>(B);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          T p = (*probs)[r * C + c];
          if (c == static_cast<std::size_t>(labs[r])) p -= T(1);
          ln->grad[r * C + c] += g * p;
        }
    });
  }
  return loss;
}

// Direct -log p form for callers that already hold probabilities.
template <typename T>
T cross_entropy_probs(const Tensor<T>& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    throw ShapeError("cross_entropy: probs " + shape_str(probs.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t C = probs.dim(1);
  T total = T(0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= C)
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                      std::to_string(C) + ")");
    total += -std::log(std::max(probs(r, static_cast<std::size_t>(labels[r])),
                                static_cast<T>(1e-30)));
  }
  return total / static_cast<T>(labels.size());
}

}  // namespace signseq
