#pragma once

// Parameterized layer objects composing the ops in ops.hpp / lstm.hpp into
// reusable pipeline stages. Layers own their parameter tensors; models own
// layers. Initialization is fully determined by (stream seed, layer uid).

#include <memory>
#include <string>
#include <vector>

#include "signseq/lstm.hpp"
#include "signseq/ops.hpp"
#include "signseq/random.hpp"

namespace signseq {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

struct ForwardCtx {
  const SequenceMask* mask = nullptr;
  Mode mode = Mode::infer;
  std::uint64_t dropout_seed = 0;  // fixed per forward call for reproducibility
};

namespace init {

template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, RngStream rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-limit, limit));
}

// scaled uniform stand-in for orthogonal recurrent init
template <typename T>
void recurrent_uniform(Tensor<T>& w, std::size_t units, RngStream rng) {
  const double limit = std::sqrt(3.0 / static_cast<double>(units));
  for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace init

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) {}
};

// ---------------------------------------------------------------------------

template <typename T>
class DenseLayer : public Layer<T> {
 public:
  DenseLayer(std::size_t in, std::size_t out, std::uint64_t init_seed)
      : W_({in, out}), b_({out}) {
    init::glorot_uniform(W_, in, out, RngStream(derive_seed(init_seed, "W")));
    W_.set_requires_grad(true);
    b_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx&) override { return dense(x, W_, b_); }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".W", W_, true});
    out.push_back({prefix + ".b", b_, true});
  }

  Tensor<T>& weight() { return W_; }
  Tensor<T>& bias() { return b_; }

 private:
  Tensor<T> W_, b_;
};

template <typename T>
class ActivationLayer : public Layer<T> {
 public:
  explicit ActivationLayer(Act kind) : kind_(kind) {}
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx&) override {
    return activation(x, kind_);
  }

 private:
  Act kind_;
};

template <typename T>
class DropoutLayer : public Layer<T> {
 public:
  DropoutLayer(double rate, std::uint64_t uid) : rate_(rate), uid_(uid) {}
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return dropout(x, rate_, ctx.mode, derive_seed(ctx.dropout_seed, "dropout", uid_));
  }

 private:
  double rate_;
  std::uint64_t uid_;
};

template <typename T>
class FlattenLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx&) override {
    return reshape(x, {x.dim(0), x.size() / x.dim(0)});
  }
};

template <typename T>
class MaskZeroLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return mask_zero(x, *ctx.mask);
  }
};

template <typename T>
class MaskedPoolLayer : public Layer<T> {
 public:
  explicit MaskedPoolLayer(Pool kind) : kind_(kind) {}
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return masked_pool(x, *ctx.mask, kind_);
  }

 private:
  Pool kind_;
};

template <typename T>
class LayerNormLayer : public Layer<T> {
 public:
  explicit LayerNormLayer(std::size_t ch) : gamma_(Tensor<T>::full({ch}, T(1))), beta_({ch}) {
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx&) override {
    return layer_norm(x, gamma_, beta_, 1e-5);
  }
  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".gamma", gamma_, true});
    out.push_back({prefix + ".beta", beta_, true});
  }

 private:
  Tensor<T> gamma_, beta_;
};

template <typename T>
class BatchNormLayer : public Layer<T> {
 public:
  explicit BatchNormLayer(std::size_t ch)
      : gamma_(Tensor<T>::full({ch}, T(1))),
        beta_({ch}),
        running_mean_({ch}),
        running_var_(Tensor<T>::full({ch}, T(1))) {
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    double momentum = 0.99;
    if (calibrating_ && ctx.mode == Mode::train) {
      // equal-weight accumulation so the running buffers end up as the plain
      // average of per-batch statistics (SWA recalibration)
      momentum = static_cast<double>(calib_count_) / static_cast<double>(calib_count_ + 1);
      ++calib_count_;
    }
    return batch_norm_1d(x, gamma_, beta_, running_mean_, running_var_, *ctx.mask, ctx.mode,
                         momentum, 1e-3);
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".gamma", gamma_, true});
    out.push_back({prefix + ".beta", beta_, true});
    out.push_back({prefix + ".running_mean", running_mean_, false});
    out.push_back({prefix + ".running_var", running_var_, false});
  }

  void begin_calibration() {
    calibrating_ = true;
    calib_count_ = 0;
    std::fill(running_mean_.vec().begin(), running_mean_.vec().end(), T(0));
    std::fill(running_var_.vec().begin(), running_var_.vec().end(), T(1));
  }
  void end_calibration() { calibrating_ = false; }

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  bool calibrating_ = false;
  std::size_t calib_count_ = 0;
};

template <typename T>
class EcaLayer : public Layer<T> {
 public:
  EcaLayer(std::size_t k, std::uint64_t init_seed) : w_({k}) {
    init::glorot_uniform(w_, k, k, RngStream(derive_seed(init_seed, "eca")));
    w_.set_requires_grad(true);
  }
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return eca(x, w_, *ctx.mask);
  }
  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".w", w_, true});
  }

 private:
  Tensor<T> w_;
};

template <typename T>
class MhsaLayer : public Layer<T> {
 public:
  MhsaLayer(std::size_t d, std::size_t heads, std::uint64_t init_seed)
      : heads_(heads), Wq_({d, d}), Wk_({d, d}), Wv_({d, d}), Wo_({d, d}) {
    if (heads == 0 || d % heads != 0)
      throw ConfigError("mhsa: d_model " + std::to_string(d) + " not divisible by heads " +
                        std::to_string(heads));
    init::glorot_uniform(Wq_, d, d, RngStream(derive_seed(init_seed, "Wq")));
    init::glorot_uniform(Wk_, d, d, RngStream(derive_seed(init_seed, "Wk")));
    init::glorot_uniform(Wv_, d, d, RngStream(derive_seed(init_seed, "Wv")));
    init::glorot_uniform(Wo_, d, d, RngStream(derive_seed(init_seed, "Wo")));
    for (Tensor<T>* w : {&Wq_, &Wk_, &Wv_, &Wo_}) w->set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return mhsa(x, heads_, Wq_, Wk_, Wv_, Wo_, *ctx.mask);
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".Wq", Wq_, true});
    out.push_back({prefix + ".Wk", Wk_, true});
    out.push_back({prefix + ".Wv", Wv_, true});
    out.push_back({prefix + ".Wo", Wo_, true});
  }

  Tensor<T>& output_proj() { return Wo_; }

 private:
  std::size_t heads_;
  Tensor<T> Wq_, Wk_, Wv_, Wo_;
};

template <typename T>
class LstmLayer : public Layer<T> {
 public:
  LstmLayer(std::size_t features, std::size_t units, std::uint64_t init_seed)
      : units_(units), Wx_({features, 4 * units}), Wh_({units, 4 * units}), b_({4 * units}) {
    init::glorot_uniform(Wx_, features, 4 * units, RngStream(derive_seed(init_seed, "Wx")));
    init::recurrent_uniform(Wh_, units, RngStream(derive_seed(init_seed, "Wh")));
    // forget gate bias starts at +1 (gate order i, f, g, o)
    for (std::size_t u = 0; u < units; ++u) b_(units + u) = T(1);
    Wx_.set_requires_grad(true);
    Wh_.set_requires_grad(true);
    b_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    return lstm_layer(x, Wx_, Wh_, b_, *ctx.mask);
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".Wx", Wx_, true});
    out.push_back({prefix + ".Wh", Wh_, true});
    out.push_back({prefix + ".b", b_, true});
  }

 private:
  std::size_t units_;
  Tensor<T> Wx_, Wh_, b_;
};

// conv block: dense expand -> conv1d (depth preserving) -> batch norm -> ECA
// -> dense project back -> residual add, re-zeroing padding at the end
template <typename T>
class ConvBlock : public Layer<T> {
 public:
  ConvBlock(std::size_t d_model, std::size_t expand_ratio, std::size_t conv_kernel,
            std::size_t k_eca, std::uint64_t init_seed)
      : expand_(d_model, expand_ratio * d_model, derive_seed(init_seed, "expand")),
        kernel_({conv_kernel, expand_ratio * d_model, expand_ratio * d_model}),
        bn_(expand_ratio * d_model),
        eca_(k_eca, derive_seed(init_seed, "eca")),
        project_(expand_ratio * d_model, d_model, derive_seed(init_seed, "project")) {
    const std::size_t ch = expand_ratio * d_model;
    init::glorot_uniform(kernel_, conv_kernel * ch, conv_kernel * ch,
                         RngStream(derive_seed(init_seed, "conv")));
    kernel_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    Tensor<T> h = expand_.forward(x, ctx);
    // no conv bias: the batch norm right after cancels any per-channel shift
    h = conv1d(h, kernel_, Tensor<T>(), *ctx.mask);
    h = bn_.forward(h, ctx);
    h = eca_.forward(h, ctx);
    h = project_.forward(h, ctx);
    return mask_zero(add(x, h), *ctx.mask);
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    expand_.collect_params(prefix + ".expand", out);
    out.push_back({prefix + ".conv.kernel", kernel_, true});
    bn_.collect_params(prefix + ".bn", out);
    eca_.collect_params(prefix + ".eca", out);
    project_.collect_params(prefix + ".project", out);
  }

  BatchNormLayer<T>& batch_norm() { return bn_; }
  DenseLayer<T>& project() { return project_; }

 private:
  DenseLayer<T> expand_;
  Tensor<T> kernel_;
  BatchNormLayer<T> bn_;
  EcaLayer<T> eca_;
  DenseLayer<T> project_;
};

// pre-norm transformer encoder block: x + mhsa(ln(x)), then h + ffn(ln(h))
template <typename T>
class TransformerBlock : public Layer<T> {
 public:
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden,
                   std::uint64_t init_seed)
      : ln1_(d_model),
        mhsa_(d_model, heads, derive_seed(init_seed, "mhsa")),
        ln2_(d_model),
        ffn_w1_(d_model, ffn_hidden, derive_seed(init_seed, "ffn1")),
        ffn_w2_(ffn_hidden, d_model, derive_seed(init_seed, "ffn2")) {}

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) override {
    Tensor<T> h = add(x, mhsa_.forward(ln1_.forward(x, ctx), ctx));
    Tensor<T> f = ffn_w2_.forward(
        activation(ffn_w1_.forward(ln2_.forward(h, ctx), ctx), Act::relu), ctx);
    return add(h, f);
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    ln1_.collect_params(prefix + ".ln1", out);
    mhsa_.collect_params(prefix + ".mhsa", out);
    ln2_.collect_params(prefix + ".ln2", out);
    ffn_w1_.collect_params(prefix + ".ffn1", out);
    ffn_w2_.collect_params(prefix + ".ffn2", out);
  }

  MhsaLayer<T>& attention() { return mhsa_; }
  DenseLayer<T>& ffn_out() { return ffn_w2_; }

 private:
  LayerNormLayer<T> ln1_;
  MhsaLayer<T> mhsa_;
  LayerNormLayer<T> ln2_;
  DenseLayer<T> ffn_w1_;
  DenseLayer<T> ffn_w2_;
};

template <typename T>
class SoftmaxLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx&) override { return softmax_last(x); }
};

}  // namespace signseq
