#pragma once

// Model assembly: the two classifier architectures, built from the layer
// library. Builders are pure functions of (config, seed); the same pair
// always yields bit-identical initial parameters.

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "signseq/layers.hpp"

namespace signseq {

enum class ArchKind { lstm, cnntrans };

inline const char* arch_name(ArchKind a) { return a == ArchKind::lstm ? "lstm" : "cnntrans"; }

inline ArchKind arch_from_name(const std::string& s) {
  if (s == "lstm") return ArchKind::lstm;
  if (s == "cnntrans") return ArchKind::cnntrans;
  throw ConfigError("unknown architecture '" + s + "' (expected lstm or cnntrans)");
}

struct ModelConfig {
  ArchKind arch = ArchKind::lstm;
  std::size_t seq_len = 50;
  std::size_t features = 174;
  std::size_t num_classes = 50;
  std::size_t lstm_units = 128;
  std::size_t head_hidden = 256;
  double dropout = 0.5;
  std::size_t conv_blocks = 3;
  std::size_t transformer_blocks = 1;
  std::size_t d_model = 192;
  std::size_t heads = 4;
  std::size_t expand_ratio = 2;
  std::size_t ffn_hidden = 0;  // 0 means 2 * d_model
  std::size_t k_eca = 5;

  static constexpr std::size_t conv_kernel = 5;

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 2 * d_model; }

  void validate() const {
    if (seq_len < 1 || features < 1 || num_classes < 1 || lstm_units < 1 || head_hidden < 1 ||
        conv_blocks < 1 || transformer_blocks < 1 || d_model < 1 || heads < 1 ||
        expand_ratio < 1 || k_eca < 1)
      throw ConfigError("model config: all counts must be >= 1");
    if (dropout < 0 || dropout >= 1) throw ConfigError("model config: dropout must be in [0, 1)");
    if (d_model % heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " must be divisible by heads " + std::to_string(heads));
    if (k_eca % 2 == 0) throw ConfigError("model config: k_eca must be odd");
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  std::vector<std::string> class_names;  // may be empty for unnamed datasets
  Mode mode = Mode::infer;

  // per-feature normalization stats captured at training time and shipped
  // with the checkpoint; identity (mean 0, std 1) until fit computes them
  Tensor<T> norm_mean, norm_std;

  std::vector<std::unique_ptr<Layer<T>>> layers;
  std::vector<std::string> layer_names;
  std::size_t head_index = 0;

  Tensor<T> forward_logits(const Tensor<T>& values, const SequenceMask& mask,
                           std::uint64_t forward_seed = 0) {
    if (values.rank() != 3 || values.dim(1) != cfg.seq_len || values.dim(2) != cfg.features)
      throw ShapeError("model forward: batch " + shape_str(values.shape()) +
                       " does not match configured [*, " + std::to_string(cfg.seq_len) + ", " +
                       std::to_string(cfg.features) + "]");
    ForwardCtx ctx{&mask, mode, forward_seed};
    Tensor<T> h = values;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = layers[i]->forward(h, ctx);
    return h;
  }

  Tensor<T> forward_probs(const Tensor<T>& values, const SequenceMask& mask,
                          std::uint64_t forward_seed = 0) {
    ForwardCtx ctx{&mask, mode, forward_seed};
    return layers.back()->forward(forward_logits(values, mask, forward_seed), ctx);
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i]->collect_params(layer_names[i], out);
    out.push_back({"data_norm.mean", norm_mean, false});
    out.push_back({"data_norm.std", norm_std, false});
    return out;
  }

  std::vector<NamedParam<T>> trainable_params() {
    std::vector<NamedParam<T>> out;
    for (auto& p : named_params())
      if (p.trainable) out.push_back(p);
    return out;
  }

  std::size_t num_trainable() {
    std::size_t n = 0;
    for (auto& p : trainable_params()) n += p.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : named_params()) p.tensor.zero_grad();
  }

  void begin_bn_calibration() {
    for (auto& l : layers)
      if (auto* cb = dynamic_cast<ConvBlock<T>*>(l.get())) cb->batch_norm().begin_calibration();
  }
  void end_bn_calibration() {
    for (auto& l : layers)
      if (auto* cb = dynamic_cast<ConvBlock<T>*>(l.get())) cb->batch_norm().end_calibration();
  }
};

namespace detail {

template <typename T>
void init_norm_stats(Model<T>& m) {
  m.norm_mean = Tensor<T>({m.cfg.features});
  m.norm_std = Tensor<T>::full({m.cfg.features}, T(1));
}

template <typename T>
void check_unique_param_names(Model<T>& m) {
  std::unordered_set<std::string> seen;
  for (auto& p : m.named_params())
    if (!seen.insert(p.name).second)
      throw ConfigError("duplicate parameter name " + p.name);
}

}  // namespace detail

// LSTM(units) -> relu -> dropout -> flatten -> dense -> relu -> dropout ->
// dense(num_classes) -> softmax
template <typename T>
Model<T> build_lstm(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.arch != ArchKind::lstm) throw ConfigError("build_lstm: config arch is not lstm");
  Model<T> m;
  m.cfg = cfg;
  detail::init_norm_stats(m);
  std::uint64_t uid = 0;
  auto stream = [&](const char* what) { return derive_seed(seed, "init", uid, detail::fnv1a(what)); };

  m.layers.push_back(std::make_unique<LstmLayer<T>>(cfg.features, cfg.lstm_units, stream("lstm")));
  m.layer_names.push_back("lstm");
  ++uid;
  m.layers.push_back(std::make_unique<ActivationLayer<T>>(Act::relu));
  m.layer_names.push_back("relu1");
  ++uid;
  m.layers.push_back(std::make_unique<DropoutLayer<T>>(cfg.dropout, uid));
  m.layer_names.push_back("dropout1");
  ++uid;
  m.layers.push_back(std::make_unique<FlattenLayer<T>>());
  m.layer_names.push_back("flatten");
  ++uid;
  m.layers.push_back(std::make_unique<DenseLayer<T>>(cfg.seq_len * cfg.lstm_units,
                                                     cfg.head_hidden, stream("dense1")));
  m.layer_names.push_back("dense1");
  ++uid;
  m.layers.push_back(std::make_unique<ActivationLayer<T>>(Act::relu));
  m.layer_names.push_back("relu2");
  ++uid;
  m.layers.push_back(std::make_unique<DropoutLayer<T>>(cfg.dropout, uid));
  m.layer_names.push_back("dropout2");
  ++uid;
  m.head_index = m.layers.size();
  m.layers.push_back(
      std::make_unique<DenseLayer<T>>(cfg.head_hidden, cfg.num_classes, stream("head")));
  m.layer_names.push_back("head");
  ++uid;
  m.layers.push_back(std::make_unique<SoftmaxLayer<T>>());
  m.layer_names.push_back("softmax");

  detail::check_unique_param_names(m);
  return m;
}

// dense(features -> d_model) -> masking -> conv blocks -> transformer blocks
// -> masked global average pool -> dense(num_classes) -> softmax
template <typename T>
Model<T> build_cnntrans(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.arch != ArchKind::cnntrans)
    throw ConfigError("build_cnntrans: config arch is not cnntrans");
  Model<T> m;
  m.cfg = cfg;
  detail::init_norm_stats(m);
  std::uint64_t uid = 0;
  auto stream = [&](const char* what) { return derive_seed(seed, "init", uid, detail::fnv1a(what)); };

  m.layers.push_back(
      std::make_unique<DenseLayer<T>>(cfg.features, cfg.d_model, stream("input_proj")));
  m.layer_names.push_back("input_proj");
  ++uid;
  m.layers.push_back(std::make_unique<MaskZeroLayer<T>>());
  m.layer_names.push_back("masking");
  ++uid;
  for (std::size_t i = 0; i < cfg.conv_blocks; ++i) {
    m.layers.push_back(std::make_unique<ConvBlock<T>>(cfg.d_model, cfg.expand_ratio,
                                                      ModelConfig::conv_kernel, cfg.k_eca,
                                                      stream("conv_block")));
    m.layer_names.push_back("conv_block" + std::to_string(i));
    ++uid;
  }
  for (std::size_t i = 0; i < cfg.transformer_blocks; ++i) {
    m.layers.push_back(std::make_unique<TransformerBlock<T>>(cfg.d_model, cfg.heads,
                                                             cfg.ffn_width(),
                                                             stream("transformer")));
    m.layer_names.push_back("transformer" + std::to_string(i));
    ++uid;
  }
  m.layers.push_back(std::make_unique<MaskedPoolLayer<T>>(Pool::global_avg));
  m.layer_names.push_back("pool");
  ++uid;
  m.head_index = m.layers.size();
  m.layers.push_back(
      std::make_unique<DenseLayer<T>>(cfg.d_model, cfg.num_classes, stream("head")));
  m.layer_names.push_back("head");
  ++uid;
  m.layers.push_back(std::make_unique<SoftmaxLayer<T>>());
  m.layer_names.push_back("softmax");

  detail::check_unique_param_names(m);
  return m;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return cfg.arch == ArchKind::lstm ? build_lstm<T>(cfg, seed) : build_cnntrans<T>(cfg, seed);
}

// Transfer-learning surgery: keep every backbone parameter bit-exact, replace
// the classifier head with a freshly initialized dense layer.
template <typename T>
void reinit_head(Model<T>& m, std::size_t new_num_classes, std::uint64_t seed) {
  if (new_num_classes < 1) throw ConfigError("reinit_head: class count must be >= 1");
  const std::size_t in_width =
      m.cfg.arch == ArchKind::lstm ? m.cfg.head_hidden : m.cfg.d_model;
  m.cfg.num_classes = new_num_classes;
  m.layers[m.head_index] = std::make_unique<DenseLayer<T>>(in_width, new_num_classes,
                                                           derive_seed(seed, "reinit_head"));
  m.class_names.clear();
}

}  // namespace signseq
