#pragma once

// Single-layer LSTM over a padded batch. Gate order in the fused weight
// matrices is i, f, g, o. Masked timesteps carry cell and hidden state
// through unchanged and emit zeros in the output sequence.

#include <Eigen/Dense>

#include <memory>
#include <vector>

#include "signseq/mask.hpp"
#include "signseq/ops.hpp"
#include "signseq/tensor.hpp"

namespace signseq {

namespace detail {

template <typename T>
struct LstmCache {
  // per-timestep activations, each [batch * units]
  std::vector<NumVec<T>> gate_i, gate_f, gate_g, gate_o, cell, tanh_cell;
  // hidden states including h_0 = 0, so hidden[t] is the input state of step t
  std::vector<NumVec<T>> hidden;
};

}  // namespace detail

template <typename T>
Tensor<T> lstm_layer(const Tensor<T>& x, const Tensor<T>& Wx, const Tensor<T>& Wh,
                     const Tensor<T>& bias, const SequenceMask& mask) {
  if (x.rank() != 3)
    throw ShapeError("lstm_layer: expected [batch, seq, features], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), F = x.dim(2);
  if (Wx.rank() != 2 || Wh.rank() != 2 || bias.rank() != 1)
    throw ShapeError("lstm_layer: bad kernel ranks");
  if (Wx.dim(0) != F)
    throw ShapeError("lstm_layer: input kernel rows " + std::to_string(Wx.dim(0)) +
                     " do not match feature count " + std::to_string(F));
  const std::size_t U = Wh.dim(0);
  const std::size_t G = 4 * U;
  if (Wx.dim(1) != G || Wh.dim(1) != G || bias.size() != G)
    throw ShapeError("lstm_layer: kernels must map to 4*units columns; Wx " +
                     shape_str(Wx.shape()) + ", Wh " + shape_str(Wh.shape()) + ", bias " +
                     shape_str(bias.shape()));
  if (mask.batch() != B || mask.max_len() != S)
    throw ShapeError("lstm_layer: mask does not match input");

  // input projection for every timestep in one GEMM
  NumVec<T> xw(B * S * G);
  {
    detail::CMapM<T> xm(x.data().data(), B * S, F);
    detail::CMapM<T> wxm(Wx.data().data(), F, G);
    detail::MapM<T> xwm(xw.data(), B * S, G);
    xwm.noalias() = xm * wxm;
  }

  auto cache = std::make_shared<detail::LstmCache<T>>();
  cache->gate_i.resize(S);
  cache->gate_f.resize(S);
  cache->gate_g.resize(S);
  cache->gate_o.resize(S);
  cache->cell.resize(S);
  cache->tanh_cell.resize(S);
  cache->hidden.resize(S + 1);
  cache->hidden[0].assign(B * U, T(0));

  Tensor<T> out({B, S, U});
  NumVec<T> z(B * G);
  NumVec<T> c_prev(B * U, T(0));

  detail::CMapM<T> whm(Wh.data().data(), U, G);
  for (std::size_t t = 0; t < S; ++t) {
    // z = xw[:, t, :] + h_prev * Wh + bias
    detail::MapM<T> zm(z.data(), B, G);
    Eigen::Map<const detail::EMat<T>, 0, Eigen::OuterStride<>> xwt(
        xw.data() + t * G, B, G, Eigen::OuterStride<>(static_cast<Eigen::Index>(S * G)));
    detail::CMapM<T> hprev(cache->hidden[t].data(), B, U);
    zm.noalias() = xwt;
    zm.noalias() += hprev * whm;
    Eigen::Map<const Eigen::RowVectorX<T>> bv(bias.data().data(), G);
    zm.rowwise() += bv;

    auto& gi = cache->gate_i[t];
    auto& gf = cache->gate_f[t];
    auto& gg = cache->gate_g[t];
    auto& go = cache->gate_o[t];
    auto& ct = cache->cell[t];
    auto& tc = cache->tanh_cell[t];
    gi.resize(B * U);
    gf.resize(B * U);
    gg.resize(B * U);
    go.resize(B * U);
    ct.resize(B * U);
    tc.resize(B * U);
    cache->hidden[t + 1].resize(B * U);
    auto& h = cache->hidden[t + 1];

    for (std::size_t b = 0; b < B; ++b) {
      const bool valid = t < mask.valid_len(b);
      const T* zr = z.data() + b * G;
      T* out_r = out.data().data() + (b * S + t) * U;
      for (std::size_t u = 0; u < U; ++u) {
        const std::size_t idx = b * U + u;
        if (!valid) {
          // state freeze + zero output
          cache->hidden[t + 1][idx] = cache->hidden[t][idx];
          ct[idx] = c_prev[idx];
          gi[idx] = gf[idx] = gg[idx] = go[idx] = tc[idx] = T(0);
          out_r[u] = T(0);
          continue;
        }
        const T i_g = detail::stable_sigmoid(zr[u]);
        const T f_g = detail::stable_sigmoid(zr[U + u]);
        const T g_g = std::tanh(zr[2 * U + u]);
        const T o_g = detail::stable_sigmoid(zr[3 * U + u]);
        const T c_new = f_g * c_prev[idx] + i_g * g_g;
        const T tc_new = std::tanh(c_new);
        gi[idx] = i_g;
        gf[idx] = f_g;
        gg[idx] = g_g;
        go[idx] = o_g;
        ct[idx] = c_new;
        tc[idx] = tc_new;
        h[idx] = o_g * tc_new;
        out_r[u] = h[idx];
      }
    }
    c_prev = ct;
  }

  if (detail::recording<T>({&x, &Wx, &Wh, &bias})) {
    auto xn = x.node(), wxn = Wx.node(), whn = Wh.node(), bn = bias.node();
    auto lens = mask.valid_lens();
    detail::attach(out, {xn, wxn, whn, bn}, [xn, wxn, whn, bn, cache, lens, B, S, F, U,
                                             G](detail::Node<T>& self) {
      NumVec<T> dh(B * U, T(0));       // grad flowing into h_t through recurrence
      NumVec<T> dc(B * U, T(0));       // grad flowing into c_t
      NumVec<T> dz(B * U * 4);         // gate pre-activation grads at step t
      NumVec<T> dxw(B * S * G, T(0));  // collected dz rows for the big input GEMMs
      NumVec<T> dwh;
      if (whn->requires_grad) dwh.assign(U * G, T(0));
      NumVec<T> db;
      if (bn->requires_grad) db.assign(G, T(0));
      detail::CMapM<T> whm(whn->data.data(), U, G);

      for (std::size_t t_plus = S; t_plus > 0; --t_plus) {
        const std::size_t t = t_plus - 1;
        const auto& gi = cache->gate_i[t];
        const auto& gf = cache->gate_f[t];
        const auto& gg = cache->gate_g[t];
        const auto& go = cache->gate_o[t];
        const auto& tc = cache->tanh_cell[t];
        const NumVec<T>* c_prev = t == 0 ? nullptr : &cache->cell[t - 1];

        for (std::size_t b = 0; b < B; ++b) {
          const bool valid = t < lens[b];
          T* dzr = dz.data() + b * 4 * U;
          for (std::size_t u = 0; u < U; ++u) {
            const std::size_t idx = b * U + u;
            if (!valid) {
              // pass-through step: dh and dc flow to t-1 untouched, no gate grads
              dzr[u] = dzr[U + u] = dzr[2 * U + u] = dzr[3 * U + u] = T(0);
              continue;
            }
            const T dh_total = dh[idx] + self.grad[(b * S + t) * U + u];
            const T i_g = gi[idx], f_g = gf[idx], g_g = gg[idx], o_g = go[idx];
            const T tc_v = tc[idx];
            const T dc_total = dc[idx] + dh_total * o_g * (T(1) - tc_v * tc_v);
            const T cp = c_prev ? (*c_prev)[idx] : T(0);
            const T d_i = dc_total * g_g;
            const T d_f = dc_total * cp;
            const T d_g = dc_total * i_g;
            const T d_o = dh_total * tc_v;
            dzr[u] = d_i * i_g * (T(1) - i_g);
            dzr[U + u] = d_f * f_g * (T(1) - f_g);
            dzr[2 * U + u] = d_g * (T(1) - g_g * g_g);
            dzr[3 * U + u] = d_o * o_g * (T(1) - o_g);
            dc[idx] = dc_total * f_g;
          }
        }

        // stash dz into the per-timestep rows of dxw
        for (std::size_t b = 0; b < B; ++b)
          std::copy(dz.data() + b * G, dz.data() + (b + 1) * G, dxw.data() + (b * S + t) * G);

        detail::CMapM<T> dzm(dz.data(), B, G);
        if (whn->requires_grad) {
          detail::CMapM<T> hprev(cache->hidden[t].data(), B, U);
          detail::MapM<T> dwhm(dwh.data(), U, G);
          dwhm.noalias() += hprev.transpose() * dzm;
        }
        if (bn->requires_grad) {
          Eigen::Map<Eigen::RowVectorX<T>> dbm(db.data(), G);
          dbm += dzm.colwise().sum();
        }
        // recurrent grad into h_{t-1}; masked rows pass dh through instead
        NumVec<T> dh_prev(B * U);
        detail::MapM<T> dhm(dh_prev.data(), B, U);
        dhm.noalias() = dzm * whm.transpose();
        for (std::size_t b = 0; b < B; ++b)
          if (t >= lens[b]) {
            const T* src = dh.data() + b * U;
            // also add the (dropped-output) grad path: output was 0, so only dh carries
            std::copy(src, src + U, dh_prev.data() + b * U);
          }
        dh = std::move(dh_prev);
      }

      if (wxn->requires_grad) {
        wxn->ensure_grad();
        detail::CMapM<T> xm(xn->data.data(), B * S, F);
        detail::CMapM<T> dxwm(dxw.data(), B * S, G);
        detail::MapM<T> gwx(wxn->grad.data(), F, G);
        gwx.noalias() += xm.transpose() * dxwm;
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::CMapM<T> dxwm(dxw.data(), B * S, G);
        detail::CMapM<T> wxm(wxn->data.data(), F, G);
        detail::MapM<T> gx(xn->grad.data(), B * S, F);
        gx.noalias() += dxwm * wxm.transpose();
      }
      if (whn->requires_grad) {
        whn->ensure_grad();
        for (std::size_t i = 0; i < dwh.size(); ++i) whn->grad[i] += dwh[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
      }
    });
  }
  return out;
}

}  // namespace signseq
