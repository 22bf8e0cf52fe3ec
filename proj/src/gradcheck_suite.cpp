#include "signseq/gradcheck_suite.hpp"

#include "signseq/model.hpp"
#include "signseq/train.hpp"

namespace signseq {

namespace {

constexpr double kLayerTol = 1e-4;
constexpr double kModelTol = 1e-3;

Tensor<double> randn(Shape shape, RngStream& rng, double scale = 0.5) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal() * scale;
  return t;
}

using Inputs = std::vector<Tensor<double>>;

GradCheckEntry run_one(const std::string& name, double tol, double eps,
                       const std::function<Tensor<double>(const Inputs&)>& op,
                       const Inputs& inputs, GradCheckOptions opts = {}) {
  opts.epsilon = eps;
  const GradCheckResult r = gradient_check(op, inputs, opts);
  return {name, r.max_rel_error, tol, r.checked, r.max_rel_error < tol};
}

}  // namespace

std::vector<GradCheckEntry> run_layer_gradchecks(double epsilon) {
  std::vector<GradCheckEntry> out;
  RngStream rng(20240915);

  out.push_back(run_one(
      "dense", kLayerTol, epsilon,
      [](const Inputs& in) { return dense(in[0], in[1], in[2]); },
      {randn({3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)}));

  // inputs kept away from the kink at 0
  {
    Tensor<double> x = randn({4, 6}, rng);
    for (auto& v : x.vec())
      if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
    out.push_back(run_one(
        "relu", kLayerTol, epsilon, [](const Inputs& in) { return relu(in[0]); }, {x}));
  }
  out.push_back(run_one(
      "sigmoid", kLayerTol, epsilon, [](const Inputs& in) { return sigmoid(in[0]); },
      {randn({4, 6}, rng)}));
  out.push_back(run_one(
      "tanh", kLayerTol, epsilon, [](const Inputs& in) { return tanh_act(in[0]); },
      {randn({4, 6}, rng)}));

  // a raw softmax sums to a constant, so pure sum-of-outputs has zero true
  // gradient everywhere; weight the outputs by fixed coefficients instead
  {
    Tensor<double> coeffs = randn({4, 5}, rng, 1.0);
    out.push_back(run_one(
        "softmax", kLayerTol, epsilon,
        [coeffs](const Inputs& in) { return mul(softmax_last(in[0]), coeffs); },
        {randn({4, 5}, rng)}));
  }

  out.push_back(run_one(
      "layer_norm", kLayerTol, epsilon,
      [](const Inputs& in) { return layer_norm(in[0], in[1], in[2]); },
      {randn({2, 3, 5}, rng), randn({5}, rng), randn({5}, rng)}));

  {
    SequenceMask mask(3, 5, {5, 3, 1});
    out.push_back(run_one(
        "batch_norm_train", kLayerTol, epsilon,
        [mask](const Inputs& in) {
          Tensor<double> rm = Tensor<double>::zeros({4});
          Tensor<double> rv = Tensor<double>::full({4}, 1.0);
          return batch_norm_1d(in[0], in[1], in[2], rm, rv, mask, Mode::train);
        },
        {randn({3, 5, 4}, rng), randn({4}, rng), randn({4}, rng)}));
    out.push_back(run_one(
        "batch_norm_infer", kLayerTol, epsilon,
        [mask](const Inputs& in) {
          Tensor<double> rm = Tensor<double>::full({4}, 0.2);
          Tensor<double> rv = Tensor<double>::full({4}, 1.5);
          return batch_norm_1d(in[0], in[1], in[2], rm, rv, mask, Mode::infer);
        },
        {randn({3, 5, 4}, rng), randn({4}, rng), randn({4}, rng)}));
  }

  out.push_back(run_one(
      "dropout", kLayerTol, epsilon,
      [](const Inputs& in) { return dropout(in[0], 0.5, Mode::train, 991); },
      {randn({4, 8}, rng)}));

  {
    SequenceMask mask(2, 6, {6, 3});
    out.push_back(run_one(
        "conv1d", kLayerTol, epsilon,
        [mask](const Inputs& in) { return conv1d(in[0], in[1], in[2], mask); },
        {randn({2, 6, 3}, rng), randn({5, 3, 4}, rng), randn({4}, rng)}));
    out.push_back(run_one(
        "masked_avg_pool", kLayerTol, epsilon,
        [mask](const Inputs& in) { return masked_pool(in[0], mask, Pool::global_avg); },
        {randn({2, 6, 3}, rng)}));
    out.push_back(run_one(
        "masked_max_pool", kLayerTol, epsilon,
        [mask](const Inputs& in) { return masked_pool(in[0], mask, Pool::global_max); },
        {randn({2, 6, 3}, rng)}));
    out.push_back(run_one(
        "eca", kLayerTol, epsilon,
        [mask](const Inputs& in) { return eca(in[0], in[1], mask); },
        {randn({2, 6, 7}, rng), randn({5}, rng)}));
  }

  {
    SequenceMask mask(2, 4, {4, 2});
    out.push_back(run_one(
        "mhsa", kLayerTol, epsilon,
        [mask](const Inputs& in) { return mhsa(in[0], 2, in[1], in[2], in[3], in[4], mask); },
        {randn({2, 4, 6}, rng), randn({6, 6}, rng), randn({6, 6}, rng), randn({6, 6}, rng),
         randn({6, 6}, rng)}));
  }

  out.push_back(run_one(
      "ffn", kLayerTol, epsilon,
      [](const Inputs& in) { return ffn(in[0], in[1], in[2], in[3], in[4]); },
      {randn({2, 3, 4}, rng), randn({4, 8}, rng), randn({8}, rng), randn({8, 4}, rng),
       randn({4}, rng)}));

  {
    SequenceMask mask(3, 5, {5, 4, 2});
    out.push_back(run_one(
        "lstm", kLayerTol, epsilon,
        [mask](const Inputs& in) { return lstm_layer(in[0], in[1], in[2], in[3], mask); },
        {randn({3, 5, 4}, rng), randn({4, 24}, rng), randn({6, 24}, rng), randn({24}, rng)}));
  }

  {
    std::vector<int> labels{0, 2, 1, 3};
    out.push_back(run_one(
        "cross_entropy", kLayerTol, epsilon,
        [labels](const Inputs& in) { return cross_entropy_logits(in[0], labels); },
        {randn({4, 4}, rng)}));
  }

  return out;
}

namespace {

// Full-model check: analytic gradients of the training loss versus central
// finite differences over the input batch and every trainable parameter.
GradCheckEntry model_gradcheck(const std::string& name, Model<double>& model,
                               const PaddedBatch<double>& batch, double epsilon) {
  const std::uint64_t fwd_seed = 1234;
  model.mode = Mode::train;
  Tensor<double> input = batch.values.clone();
  input.set_requires_grad(true);

  auto loss_value = [&]() -> double {
    Tensor<double> logits = model.forward_logits(input, batch.mask, fwd_seed);
    Tensor<double> loss = cross_entropy_logits(logits, batch.labels);
    return loss(0);
  };

  model.zero_grads();
  {
    Tensor<double> logits = model.forward_logits(input, batch.mask, fwd_seed);
    Tensor<double> loss = cross_entropy_logits(logits, batch.labels);
    loss.check_finite("model gradcheck loss");
    loss.backward();
  }

  auto params = model.trainable_params();
  std::vector<NamedParam<double>> checked = params;
  checked.push_back({"input", input, true});

  GradCheckEntry entry{name, 0.0, kModelTol, 0, false};
  NoGradGuard no_grad;
  for (auto& p : checked) {
    std::vector<double> analytic(p.tensor.size(), 0.0);
    if (p.tensor.has_grad()) {
      auto g = p.tensor.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    for (std::size_t e = 0; e < p.tensor.size(); ++e) {
      const double saved = p.tensor(e);
      p.tensor(e) = saved + epsilon;
      const double up = loss_value();
      p.tensor(e) = saved - epsilon;
      const double down = loss_value();
      p.tensor(e) = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("model gradcheck: non-finite perturbed loss");
      const double numeric = (up - down) / (2.0 * epsilon);
      const double rel = std::abs(analytic[e] - numeric) /
                         std::max({std::abs(analytic[e]), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
  }
  entry.passed = entry.max_rel_error < kModelTol;
  return entry;
}

PaddedBatch<double> tiny_batch(RngStream& rng) {
  // batch 2, seq 6, feat 8, classes 3; one sample padded
  Tensor<double> values({2, 6, 8});
  for (auto& v : values.vec()) v = rng.normal() * 0.8;
  SequenceMask mask(2, 6, {6, 4});
  for (std::size_t t = 4; t < 6; ++t)
    for (std::size_t f = 0; f < 8; ++f) values(1, t, f) = 0.0;
  return {std::move(values), mask, {0, 2}};
}

}  // namespace

std::vector<GradCheckEntry> run_model_gradchecks(double epsilon) {
  std::vector<GradCheckEntry> out;
  RngStream rng(77001);

  {
    ModelConfig cfg;
    cfg.arch = ArchKind::lstm;
    cfg.seq_len = 6;
    cfg.features = 8;
    cfg.num_classes = 3;
    cfg.lstm_units = 5;
    cfg.head_hidden = 7;
    cfg.dropout = 0.5;
    Model<double> model = build_lstm<double>(cfg, 4242);
    PaddedBatch<double> batch = tiny_batch(rng);
    out.push_back(model_gradcheck("lstm_model", model, batch, epsilon));
  }
  {
    ModelConfig cfg;
    cfg.arch = ArchKind::cnntrans;
    cfg.seq_len = 6;
    cfg.features = 8;
    cfg.num_classes = 3;
    cfg.conv_blocks = 2;
    cfg.transformer_blocks = 1;
    cfg.d_model = 6;
    cfg.heads = 2;
    cfg.expand_ratio = 2;
    cfg.k_eca = 3;
    cfg.dropout = 0.0;
    Model<double> model = build_cnntrans<double>(cfg, 4242);
    PaddedBatch<double> batch = tiny_batch(rng);
    out.push_back(model_gradcheck("cnntrans_model", model, batch, epsilon));
  }
  return out;
}

}  // namespace signseq
