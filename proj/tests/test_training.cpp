#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "signseq/eval.hpp"
#include "signseq/train.hpp"

using namespace signseq;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() /
                     ("signseq_train_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// scalar rectified-Adam reference, written independently of the optimizer
struct ScalarRAdamRef {
  double b1, b2, eps, wd;
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double rho_inf = 2.0 / (1 - b2) - 1.0;
    const double rho_t =
        rho_inf - 2.0 * t * std::pow(b2, t) / (1 - std::pow(b2, t));
    double update;
    if (rho_t > 4.0) {
      const double r = std::sqrt(((rho_t - 4) * (rho_t - 2) * rho_inf) /
                                 ((rho_inf - 4) * (rho_inf - 2) * rho_t));
      update = lr * r * mhat / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    } else {
      update = lr * mhat;
    }
    return p - update - lr * wd * p;
  }
};

}  // namespace

TEST_CASE("cross entropy: analytic values and oracle") {
  // uniform logits over 50 classes -> ln 50
  Tensor<double> logits = Tensor<double>::zeros({1, 50});
  Tensor<double> loss = cross_entropy_logits(logits, {7});
  CHECK(loss(0) == doctest::Approx(std::log(50.0)).epsilon(1e-12));

  // random 3-class case against a direct -log softmax oracle
  RngStream rng(3);
  Tensor<double> l({4, 3});
  for (auto& v : l.vec()) v = rng.normal() * 2;
  std::vector<int> labels{0, 2, 1, 1};
  double expect = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mx = std::max({l(r, 0), l(r, 1), l(r, 2)});
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(l(r, c) - mx);
    expect += -std::log(std::exp(l(r, static_cast<std::size_t>(labels[r])) - mx) / z);
  }
  expect /= 4;
  CHECK(cross_entropy_logits(l, labels)(0) == doctest::Approx(expect).epsilon(1e-6));

  CHECK_THROWS_AS(cross_entropy_logits(l, {0, 1, 2, 3}), DataError);  // label out of range
}

TEST_CASE("radam: rho_1 = 1 momentum branch, no-op on zero grads, bowl convergence") {
  // t=1 with beta2=0.999: rho_1 = 1, so the un-adapted momentum branch runs
  {
    Tensor<double> p = Tensor<double>::scalar(1.0);
    p.set_requires_grad(true);
    p.grad()[0] = 2.0;
    std::vector<NamedParam<double>> params{{"p", p, true}};
    RAdam<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.step(params, 0.1);
    // momentum branch: update = lr * mhat = lr * g
    CHECK(p(0) == doctest::Approx(1.0 - 0.1 * 2.0).epsilon(1e-12));
  }
  // zero gradients, zero weight decay: parameters unchanged
  {
    Tensor<double> p = Tensor<double>::scalar(3.5);
    p.set_requires_grad(true);
    p.grad();  // zero-filled
    std::vector<NamedParam<double>> params{{"p", p, true}};
    RAdam<double> opt(0.9, 0.999, 1e-8, 0.0);
    for (int i = 0; i < 10; ++i) opt.step(params, 0.1);
    CHECK(p(0) == 3.5);
  }
  // non-finite gradient rejected
  {
    Tensor<double> p = Tensor<double>::scalar(1.0);
    p.set_requires_grad(true);
    p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<NamedParam<double>> params{{"p", p, true}};
    RAdam<double> opt(0.9, 0.999, 1e-8, 0.0);
    CHECK_THROWS_AS(opt.step(params, 0.1), NumericError);
  }
  // quadratic bowl: loss strictly decreases to near the optimum
  {
    Tensor<double> p = Tensor<double>::scalar(5.0);
    p.set_requires_grad(true);
    std::vector<NamedParam<double>> params{{"p", p, true}};
    RAdam<double> opt(0.9, 0.999, 1e-8, 0.0);
    for (int i = 0; i < 4000; ++i) {
      p.zero_grad();
      p.grad()[0] = 2.0 * (p(0) - 3.0);  // d/dp (p-3)^2
      opt.step(params, 0.01);
    }
    CHECK(std::abs(p(0) - 3.0) * std::abs(p(0) - 3.0) < 1e-6);
  }
}

TEST_CASE("radam matches the independent scalar reference to 1e-10") {
  RngStream rng(2024);
  for (int trace = 0; trace < 100; ++trace) {
    const double wd = trace % 3 == 0 ? 0.1 : 0.0;
    const double lr = 0.001 + 0.01 * rng.uniform();
    Tensor<double> p = Tensor<double>::scalar(rng.normal());
    p.set_requires_grad(true);
    std::vector<NamedParam<double>> params{{"p", p, true}};
    RAdam<double> opt(0.9, 0.999, 1e-8, wd);
    ScalarRAdamRef ref{0.9, 0.999, 1e-8, wd};
    double ref_p = p(0);
    for (int step = 0; step < 20; ++step) {
      const double g = rng.normal();
      p.zero_grad();
      p.grad()[0] = g;
      opt.step(params, lr);
      ref_p = ref.step(ref_p, g, lr);
      const double denom = std::max(std::abs(ref_p), 1e-12);
      CHECK(std::abs(p(0) - ref_p) / denom < 1e-10);
    }
  }
}

TEST_CASE("lookahead: sync arithmetic and scalar simulation") {
  // fast=2, slow=0, alpha=0.5 at a sync point: both become 1
  {
    Tensor<double> p = Tensor<double>::scalar(0.0);
    std::vector<NamedParam<double>> params{{"p", p, true}};
    Lookahead<double> la(1, 0.5);
    la.init(params);
    p(0) = 2.0;  // fast weight moved by the inner optimizer
    la.after_step(params);
    CHECK(p(0) == doctest::Approx(1.0));
  }
  // alpha = 1: lookahead is the identity across sync boundaries
  {
    Tensor<double> p = Tensor<double>::scalar(0.0);
    std::vector<NamedParam<double>> params{{"p", p, true}};
    Lookahead<double> la(2, 1.0);
    la.init(params);
    p(0) = 3.0;
    la.after_step(params);  // inner step 1, no sync
    CHECK(p(0) == 3.0);
    p(0) = 4.0;
    la.after_step(params);  // sync: slow += 1.0 * (4 - slow) = 4
    CHECK(p(0) == 4.0);
  }
  // k=1, alpha=0.5, constant fast drift: slow follows exponential average
  {
    Tensor<double> p = Tensor<double>::scalar(0.0);
    std::vector<NamedParam<double>> params{{"p", p, true}};
    Lookahead<double> la(1, 0.5);
    la.init(params);
    double sim_slow = 0.0;
    for (int i = 0; i < 10; ++i) {
      const double fast = p(0) + 1.0;  // inner optimizer adds 1 each step
      p(0) = fast;
      la.after_step(params);
      sim_slow = sim_slow + 0.5 * (fast - sim_slow);
      CHECK(p(0) == doctest::Approx(sim_slow).epsilon(1e-12));
    }
  }
}

TEST_CASE("lr_schedule: endpoint exactness and shapes") {
  TrainConfig cfg;
  cfg.decay_type = DecayType::cosine;
  const std::size_t total = 1000;
  CHECK(lr_schedule(0, total, cfg) == 5e-5);   // bit-exact start
  CHECK(lr_schedule(total, total, cfg) == 1e-6);  // bit-exact floor
  CHECK(lr_schedule(500, total, cfg) ==
        doctest::Approx(1e-6 + (5e-5 - 1e-6) / 2).epsilon(1e-12));
  CHECK(lr_schedule(500, total, cfg) == doctest::Approx(2.55e-5).epsilon(1e-12));
  // monotone non-increasing after step 0
  double prev = lr_schedule(0, total, cfg);
  for (std::size_t s = 1; s <= total; ++s) {
    const double lr = lr_schedule(s, total, cfg);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }
  CHECK_THROWS_AS(lr_schedule(total + 1, total, cfg), ConfigError);

  cfg.decay_type = DecayType::onecycle;
  CHECK(lr_schedule(0, total, cfg) == doctest::Approx(5e-5 / 25).epsilon(1e-12));
  CHECK(lr_schedule(300, total, cfg) == 5e-5);       // peak at 30% warmup
  CHECK(lr_schedule(total, total, cfg) == 1e-6);     // anneals to the floor
  CHECK(lr_schedule(150, total, cfg) ==
        doctest::Approx(5e-5 / 25 + (5e-5 - 5e-5 / 25) * 0.5).epsilon(1e-9));
}

TEST_CASE("swa: snapshot means") {
  auto scalar_params = [](double v) {
    Tensor<double> p = Tensor<double>::scalar(v);
    return std::vector<NamedParam<double>>{{"p", p, true}};
  };
  {
    auto params = scalar_params(4.0);
    SwaAverager<double> swa;
    swa.update(params);
    swa.update(params);
    swa.write_to(params);
    CHECK(params[0].tensor(0) == 4.0);
  }
  {
    auto params = scalar_params(0.0);
    SwaAverager<double> swa;
    swa.update(params);
    params[0].tensor(0) = 2.0;
    swa.update(params);
    swa.write_to(params);
    CHECK(params[0].tensor(0) == doctest::Approx(1.0));
  }
  {
    RngStream rng(8);
    Tensor<double> p({5});
    std::vector<NamedParam<double>> params{{"p", p, true}};
    SwaAverager<double> swa;
    std::vector<std::vector<double>> snaps;
    for (int s = 0; s < 3; ++s) {
      for (auto& v : p.vec()) v = rng.normal();
      snaps.emplace_back(p.vec().begin(), p.vec().end());
      swa.update(params);
    }
    swa.write_to(params);
    for (std::size_t i = 0; i < 5; ++i) {
      const double mean = (snaps[0][i] + snaps[1][i] + snaps[2][i]) / 3.0;
      CHECK(p(i) == doctest::Approx(mean).epsilon(1e-7));
    }
  }
  {
    SwaAverager<double> swa;
    auto params = scalar_params(1.0);
    CHECK_THROWS_AS(swa.write_to(params), ConfigError);  // finalize with no snapshots
  }
}

TEST_CASE("early stopping policies") {
  EarlyStopPolicy policy;  // patience 10, min_delta 0
  std::vector<TrainLogRow> history;
  for (int e = 0; e < 30; ++e) {
    TrainLogRow row;
    row.epoch = e + 1;
    row.val_loss = 1.0 / (e + 1);  // monotonically improving
    history.push_back(row);
    CHECK(early_stop_check(history, policy) == StopDecision::keep_going);
  }
  // flat val loss for patience + 1 epochs stops
  history.clear();
  for (int e = 0; e < 12; ++e) {
    TrainLogRow row;
    row.epoch = e + 1;
    row.val_loss = 0.7;
    history.push_back(row);
  }
  CHECK(early_stop_check(history, policy) == StopDecision::stop);

  // literal-paper policy: train loss above val loss stops immediately
  EarlyStopPolicy literal;
  literal.literal_paper = true;
  std::vector<TrainLogRow> h2(1);
  h2[0].train_loss = 0.5;
  h2[0].val_loss = 0.4;
  CHECK(early_stop_check(h2, literal) == StopDecision::stop);
  h2[0].train_loss = 0.3;
  CHECK(early_stop_check(h2, literal) == StopDecision::keep_going);

  EarlyStopPolicy off;
  off.enabled = false;
  CHECK(early_stop_check(history, off) == StopDecision::keep_going);
}

TEST_CASE("checkpoint: lossless round trip and corruption errors") {
  const fs::path dir = temp_dir("ckpt");
  ModelConfig cfg;
  cfg.arch = ArchKind::cnntrans;
  cfg.seq_len = 8;
  cfg.features = 5;
  cfg.num_classes = 4;
  cfg.d_model = 6;
  cfg.heads = 2;
  cfg.conv_blocks = 1;
  Model<float> m = build_cnntrans<float>(cfg, 11);
  m.class_names = {"a", "b", "c", "d"};

  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);
  Model<float> back = load_checkpoint(path);
  CHECK(back.cfg.arch == ArchKind::cnntrans);
  CHECK(back.class_names == m.class_names);

  auto pa = m.named_params();
  auto pb = back.named_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor.vec() == pb[i].tensor.vec());

  // forward equality, bit for bit
  Tensor<float> x({1, 8, 5});
  RngStream rng(2);
  for (auto& v : x.vec()) v = static_cast<float>(rng.normal());
  SequenceMask mask = SequenceMask::all_valid(1, 8);
  m.mode = back.mode = Mode::infer;
  CHECK(m.forward_probs(x, mask).vec() == back.forward_probs(x, mask).vec());

  // truncated file
  {
    std::string bytes = slurp(path);
    bytes.resize(bytes.size() / 2);
    std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "trunc.ckpt").string()),
                       doctest::Contains("truncated"), DataError);

  // bad magic
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << "XXXX" << std::string(32, '\0');
  }
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.ckpt").string()),
                       doctest::Contains("magic"), DataError);

  // loading a cnntrans checkpoint into an lstm model is a config mismatch
  ModelConfig lcfg;
  lcfg.arch = ArchKind::lstm;
  lcfg.seq_len = 8;
  lcfg.features = 5;
  lcfg.num_classes = 4;
  Model<float> lstm = build_lstm<float>(lcfg, 1);
  CHECK_THROWS_AS(load_checkpoint_into(lstm, path), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("fit: overfit smoke, logging contract, determinism") {
  const fs::path dir = temp_dir("fit");
  Dataset ds = synth_generate(3, 8, 8, 6, 515, 0.05);
  auto [train_ds, val_ds] = split_train_val(ds, 0.25, 1);

  ModelConfig mcfg;
  mcfg.arch = ArchKind::cnntrans;
  mcfg.seq_len = 8;
  mcfg.features = 6;
  mcfg.num_classes = 3;
  mcfg.d_model = 8;
  mcfg.heads = 2;
  mcfg.conv_blocks = 1;
  mcfg.dropout = 0.0;

  TrainConfig tcfg;
  tcfg.epochs = 60;
  tcfg.batch_size = 8;
  tcfg.lr_start = 3e-3;
  tcfg.lr_min = 1e-5;
  tcfg.weight_decay = 0.0;
  tcfg.decay_type = DecayType::cosine;
  tcfg.seed = 42;
  tcfg.swa = true;
  tcfg.early_stop.enabled = false;
  tcfg.checkpoint_dir = (dir / "run1").string();
  tcfg.log_path = (dir / "run1" / "log.csv").string();
  fs::create_directories(dir / "run1");

  Model<float> model = build_model<float>(mcfg, tcfg.seed);
  FitResult r = fit(model, train_ds, val_ds, tcfg);

  REQUIRE(r.history.size() == 60);  // one row per epoch, no early stop
  double best_train = 0;
  for (const auto& row : r.history) best_train = std::max(best_train, row.train_acc);
  CHECK(best_train == doctest::Approx(1.0));  // toy overfits
  CHECK(r.swa_applied);
  CHECK(r.best_val_acc > 0.5);

  // lr column matches the schedule at the first step of each epoch
  const std::size_t steps_per_epoch = (train_ds.samples.size() + 7) / 8;
  for (std::size_t e = 0; e < r.history.size(); ++e)
    CHECK(r.history[e].lr == lr_schedule(e * steps_per_epoch, steps_per_epoch * 60, tcfg));

  // losses finite and non-negative, accuracies in range
  for (const auto& row : r.history) {
    CHECK(row.train_loss >= 0);
    CHECK(row.val_loss >= 0);
    CHECK(row.train_acc >= 0);
    CHECK(row.train_acc <= 1);
    CHECK(row.val_acc >= 0);
    CHECK(row.val_acc <= 1);
  }

  // determinism: a second run with the same seed gives bit-identical
  // checkpoints and identical log rows up to wall time
  TrainConfig tcfg2 = tcfg;
  tcfg2.checkpoint_dir = (dir / "run2").string();
  tcfg2.log_path = (dir / "run2" / "log.csv").string();
  fs::create_directories(dir / "run2");
  Model<float> model2 = build_model<float>(mcfg, tcfg2.seed);
  FitResult r2 = fit(model2, train_ds, val_ds, tcfg2);

  CHECK(slurp(dir / "run1" / "best.ckpt") == slurp(dir / "run2" / "best.ckpt"));
  CHECK(slurp(dir / "run1" / "final.ckpt") == slurp(dir / "run2" / "final.ckpt"));
  REQUIRE(r2.history.size() == r.history.size());
  for (std::size_t e = 0; e < r.history.size(); ++e) {
    CHECK(r.history[e].train_loss == r2.history[e].train_loss);
    CHECK(r.history[e].train_acc == r2.history[e].train_acc);
    CHECK(r.history[e].val_loss == r2.history[e].val_loss);
    CHECK(r.history[e].val_acc == r2.history[e].val_acc);
    CHECK(r.history[e].lr == r2.history[e].lr);
  }

  // the log file has one row per epoch plus a header
  std::ifstream log(tcfg.log_path);
  std::string line;
  std::size_t rows = 0;
  std::getline(log, line);
  CHECK(line == "epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds");
  while (std::getline(log, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 60);
  fs::remove_all(dir);
}

TEST_CASE("fit: small-lr sanity, full-batch loss strictly decreases early") {
  const fs::path dir = temp_dir("sanity");
  Dataset ds = synth_generate(3, 8, 8, 6, 515, 0.05);
  auto [train_ds, val_ds] = split_train_val(ds, 0.25, 1);

  ModelConfig mcfg;
  mcfg.arch = ArchKind::lstm;
  mcfg.seq_len = 8;
  mcfg.features = 6;
  mcfg.num_classes = 3;
  mcfg.lstm_units = 8;
  mcfg.head_hidden = 12;
  mcfg.dropout = 0.0;

  TrainConfig tcfg;
  tcfg.epochs = 5;
  tcfg.batch_size = 64;  // full batch: each epoch is exactly one step
  tcfg.lr_start = 1e-3;
  tcfg.lr_min = 1e-6;
  tcfg.weight_decay = 0.0;
  tcfg.decay_type = DecayType::cosine;
  tcfg.seed = 42;
  tcfg.early_stop.enabled = false;
  tcfg.checkpoint_dir = (dir / "run").string();

  Model<float> model = build_model<float>(mcfg, tcfg.seed);
  FitResult r = fit(model, train_ds, val_ds, tcfg);
  REQUIRE(r.history.size() == 5);
  for (std::size_t e = 1; e < 5; ++e)
    CHECK(r.history[e].train_loss < r.history[e - 1].train_loss);
  fs::remove_all(dir);
}

TEST_CASE("fit aborts on invalid setups") {
  Dataset ds = synth_generate(2, 3, 4, 3, 1, 0.05);
  auto [train_ds, val_ds] = split_train_val(ds, 0.34, 1);
  ModelConfig mcfg;
  mcfg.arch = ArchKind::lstm;
  mcfg.seq_len = 4;
  mcfg.features = 3;
  mcfg.num_classes = 2;
  mcfg.lstm_units = 3;
  mcfg.head_hidden = 4;
  Model<float> model = build_lstm<float>(mcfg, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(fit(model, train_ds, val_ds, cfg), ConfigError);  // no checkpoint dir
  cfg.checkpoint_dir = (fs::temp_directory_path() / "signseq_badcfg").string();
  cfg.lr_min = 1.0;  // above lr_start
  CHECK_THROWS_AS(fit(model, train_ds, val_ds, cfg), ConfigError);
}
