#pragma once

// Training stack: categorical cross entropy (ops.hpp), rectified Adam wrapped
// in Lookahead, cosine / one-cycle schedules, stochastic weight averaging,
// CSV logging, best-checkpoint tracking, early stopping, and the fit loop
// tying them together. Everything random flows from TrainConfig::seed through
// named streams, so a (config, seed, data) triple reproduces bit-identical
// checkpoints and log rows (wall-clock column aside).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "signseq/data.hpp"
#include "signseq/model.hpp"

namespace signseq {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class DecayType { cosine, onecycle };

inline const char* decay_name(DecayType d) {
  return d == DecayType::cosine ? "cosine" : "onecycle";
}

inline DecayType decay_from_name(const std::string& s) {
  if (s == "cosine") return DecayType::cosine;
  if (s == "onecycle") return DecayType::onecycle;
  throw ConfigError("unknown decay type '" + s + "' (expected cosine or onecycle)");
}

struct EarlyStopPolicy {
  bool enabled = true;
  std::size_t patience = 10;
  double min_delta = 0.0;
  // literal reading of the source training description: stop as soon as
  // train_loss exceeds val_loss
  bool literal_paper = false;
};

struct TrainConfig {
  std::size_t epochs = 150;       // 200 for lstm, 150 for cnntrans at the CLI
  std::size_t batch_size = 64;
  double lr_start = 5e-5;
  double lr_min = 1e-6;
  double weight_decay = 0.1;
  DecayType decay_type = DecayType::cosine;
  std::uint64_t seed = 42;

  bool swa = false;
  double swa_start_fraction = 0.75;  // snapshots over the last 25% of epochs
  EarlyStopPolicy early_stop;

  bool lookahead = true;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  NormScheme normalize = NormScheme::zscore;
  AugmentConfig augment;

  std::string checkpoint_dir;  // best.ckpt / final.ckpt land here
  std::string log_path;        // CSV training log; empty writes no file

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("train config: epochs/batch_size >= 1");
    if (!(lr_min < lr_start))
      throw ConfigError("train config: lr_min must be below lr_start");
    if (weight_decay < 0) throw ConfigError("train config: weight decay must be >= 0");
    if (swa_start_fraction < 0 || swa_start_fraction >= 1)
      throw ConfigError("train config: swa_start_fraction must be in [0, 1)");
    if (lookahead && lookahead_k < 1) throw ConfigError("train config: lookahead k >= 1");
  }
};

struct TrainLogRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0, lr = 0, wall_seconds = 0;
};

// ---------------------------------------------------------------------------
// learning-rate schedules
// ---------------------------------------------------------------------------

// Endpoints are returned as the configured constants themselves so they can
// be compared bit-exactly.
inline double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ConfigError("lr_schedule: total_steps must be >= 1");
  if (step > total_steps)
    throw ConfigError("lr_schedule: step " + std::to_string(step) + " beyond total " +
                      std::to_string(total_steps));
  constexpr double kPi = 3.141592653589793238462643;
  auto cosine = [&](std::size_t s, std::size_t n, double hi, double lo) {
    if (s == 0) return hi;
    if (s >= n) return lo;
    return lo + (hi - lo) * (1.0 + std::cos(kPi * static_cast<double>(s) /
                                            static_cast<double>(n))) / 2.0;
  };
  if (cfg.decay_type == DecayType::cosine)
    return cosine(step, total_steps, cfg.lr_start, cfg.lr_min);

  // one-cycle: linear warmup from lr_start/25 over the first 30% of steps,
  // then a cosine anneal down to lr_min
  constexpr double kDivFactor = 25.0;
  constexpr double kWarmupFraction = 0.3;
  const std::size_t warmup =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                   kWarmupFraction * static_cast<double>(total_steps))));
  const double lr_floor = cfg.lr_start / kDivFactor;
  if (step < warmup)
    return lr_floor + (cfg.lr_start - lr_floor) * static_cast<double>(step) /
                          static_cast<double>(warmup);
  return cosine(step - warmup, total_steps - warmup, cfg.lr_start, cfg.lr_min);
}

// ---------------------------------------------------------------------------
// rectified Adam with decoupled weight decay
// ---------------------------------------------------------------------------

template <typename T>
class RAdam {
 public:
  RAdam(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  std::int64_t steps() const { return t_; }

  void step(std::vector<NamedParam<T>>& params, double lr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor.size(), 0.0);
        v_[i].assign(params[i].tensor.size(), 0.0);
      }
    }
    ++t_;
    const double t = static_cast<double>(t_);
    const double b1t = std::pow(beta1_, t);
    const double b2t = std::pow(beta2_, t);
    const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    double r = 0.0;
    if (rectified)
      r = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                    ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

    for (std::size_t i = 0; i < params.size(); ++i) {
      auto data = params[i].tensor.data();
      if (!params[i].tensor.has_grad())
        throw NumericError("radam_step: parameter " + params[i].name + " has no gradient");
      auto grad = params[i].tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t e = 0; e < data.size(); ++e) {
        const double g = static_cast<double>(grad[e]);
        if (!std::isfinite(g))
          throw NumericError("radam_step: non-finite gradient in " + params[i].name);
        m[e] = beta1_ * m[e] + (1.0 - beta1_) * g;
        v[e] = beta2_ * v[e] + (1.0 - beta2_) * g * g;
        const double mhat = m[e] / (1.0 - b1t);
        double update;
        if (rectified) {
          const double vhat = std::sqrt(v[e] / (1.0 - b2t));
          update = lr * r * mhat / (vhat + eps_);
        } else {
          update = lr * mhat;  // un-adapted momentum step while variance is untracked
        }
        const double p = static_cast<double>(data[e]);
        data[e] = static_cast<T>(p - update - lr * weight_decay_ * p);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<NumVec<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Lookahead wrapper: every k fast steps, pull slow weights toward fast and
// reset fast to slow
// ---------------------------------------------------------------------------

template <typename T>
class Lookahead {
 public:
  Lookahead(std::size_t k, double alpha) : k_(k), alpha_(alpha) {}

  void init(std::vector<NamedParam<T>>& params) {
    slow_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto d = params[i].tensor.data();
      slow_[i].assign(d.begin(), d.end());
    }
  }

  void after_step(std::vector<NamedParam<T>>& params) {
    if (slow_.empty()) init(params);
    if (++inner_ % k_ != 0) return;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto fast = params[i].tensor.data();
      auto& slow = slow_[i];
      for (std::size_t e = 0; e < fast.size(); ++e) {
        const double s = static_cast<double>(slow[e]) +
                         alpha_ * (static_cast<double>(fast[e]) - static_cast<double>(slow[e]));
        slow[e] = static_cast<T>(s);
        fast[e] = slow[e];
      }
    }
  }

 private:
  std::size_t k_;
  double alpha_;
  std::size_t inner_ = 0;
  std::vector<NumVec<T>> slow_;
};

// ---------------------------------------------------------------------------
// stochastic weight averaging
// ---------------------------------------------------------------------------

template <typename T>
class SwaAverager {
 public:
  void update(std::vector<NamedParam<T>>& params) {
    if (avg_.empty()) {
      avg_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) avg_[i].assign(params[i].tensor.size(), 0.0);
    }
    ++count_;
    const double n = static_cast<double>(count_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto d = params[i].tensor.data();
      for (std::size_t e = 0; e < d.size(); ++e)
        avg_[i][e] += (static_cast<double>(d[e]) - avg_[i][e]) / n;
    }
  }

  std::size_t count() const { return count_; }

  void write_to(std::vector<NamedParam<T>>& params) const {
    if (count_ == 0) throw ConfigError("swa_finalize: no snapshots captured");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto d = params[i].tensor.data();
      for (std::size_t e = 0; e < d.size(); ++e) d[e] = static_cast<T>(avg_[i][e]);
    }
  }

 private:
  std::size_t count_ = 0;
  std::vector<NumVec<double>> avg_;
};

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

enum class StopDecision { keep_going, stop };

inline StopDecision early_stop_check(const std::vector<TrainLogRow>& history,
                                     const EarlyStopPolicy& policy) {
  if (!policy.enabled || history.empty()) return StopDecision::keep_going;
  if (policy.literal_paper)
    return history.back().train_loss > history.back().val_loss ? StopDecision::stop
                                                               : StopDecision::keep_going;
  double best = history[0].val_loss;
  std::size_t since_improve = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].val_loss < best - policy.min_delta) {
      best = history[i].val_loss;
      since_improve = 0;
    } else {
      ++since_improve;
    }
  }
  return since_improve >= policy.patience ? StopDecision::stop : StopDecision::keep_going;
}

// ---------------------------------------------------------------------------
// checkpoint format (SSE1): config blob + named float32 parameter tensors
// ---------------------------------------------------------------------------

namespace detail {

inline void ckpt_put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

class CkptReader {
 public:
  CkptReader(std::string buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw DataError("corrupt checkpoint (truncated): " + path_);
  }
  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string config_blob(const ModelConfig& cfg, const std::vector<std::string>& classes) {
  char num[64];
  std::string out;
  auto kv = [&](const char* k, const std::string& v) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  };
  kv("arch", arch_name(cfg.arch));
  kv("seq_len", std::to_string(cfg.seq_len));
  kv("features", std::to_string(cfg.features));
  kv("num_classes", std::to_string(cfg.num_classes));
  kv("lstm_units", std::to_string(cfg.lstm_units));
  kv("head_hidden", std::to_string(cfg.head_hidden));
  std::snprintf(num, sizeof(num), "%.17g", cfg.dropout);
  kv("dropout", num);
  kv("conv_blocks", std::to_string(cfg.conv_blocks));
  kv("transformer_blocks", std::to_string(cfg.transformer_blocks));
  kv("d_model", std::to_string(cfg.d_model));
  kv("heads", std::to_string(cfg.heads));
  kv("expand_ratio", std::to_string(cfg.expand_ratio));
  kv("ffn_hidden", std::to_string(cfg.ffn_width()));
  kv("k_eca", std::to_string(cfg.k_eca));
  std::string joined;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (i) joined += ',';
    joined += classes[i];
  }
  kv("class_names", joined);
  return out;
}

inline void parse_config_blob(const std::string& blob, ModelConfig& cfg,
                              std::vector<std::string>& classes) {
  std::istringstream in(blob);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw DataError("corrupt checkpoint config line: " + line);
    const std::string k = line.substr(0, eq);
    const std::string v = line.substr(eq + 1);
    if (k == "arch") cfg.arch = arch_from_name(v);
    else if (k == "seq_len") cfg.seq_len = std::stoul(v);
    else if (k == "features") cfg.features = std::stoul(v);
    else if (k == "num_classes") cfg.num_classes = std::stoul(v);
    else if (k == "lstm_units") cfg.lstm_units = std::stoul(v);
    else if (k == "head_hidden") cfg.head_hidden = std::stoul(v);
    else if (k == "dropout") cfg.dropout = std::stod(v);
    else if (k == "conv_blocks") cfg.conv_blocks = std::stoul(v);
    else if (k == "transformer_blocks") cfg.transformer_blocks = std::stoul(v);
    else if (k == "d_model") cfg.d_model = std::stoul(v);
    else if (k == "heads") cfg.heads = std::stoul(v);
    else if (k == "expand_ratio") cfg.expand_ratio = std::stoul(v);
    else if (k == "ffn_hidden") cfg.ffn_hidden = std::stoul(v);
    else if (k == "k_eca") cfg.k_eca = std::stoul(v);
    else if (k == "class_names") {
      classes.clear();
      std::string cur;
      for (char c : v) {
        if (c == ',') {
          classes.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      if (!cur.empty() || !v.empty()) classes.push_back(cur);
    } else {
      throw DataError("unknown checkpoint config key: " + k);
    }
  }
}

}  // namespace detail

inline constexpr char kCkptMagic[4] = {'S', 'S', 'E', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path) {
  std::string out;
  out.append(kCkptMagic, 4);
  detail::ckpt_put_u32(out, kCkptVersion);
  const std::string blob = detail::config_blob(model.cfg, model.class_names);
  detail::ckpt_put_u32(out, static_cast<std::uint32_t>(blob.size()));
  out += blob;
  auto params = model.named_params();
  detail::ckpt_put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (auto& p : params) {
    detail::ckpt_put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Shape& shape = p.tensor.shape();
    detail::ckpt_put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::ckpt_put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t e = 0; e < p.tensor.size(); ++e) {
      const float f = static_cast<float>(p.tensor(e));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::ckpt_put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write on checkpoint: " + path);
}

namespace detail {

template <typename T>
void load_params_from(CkptReader& r, Model<T>& model, const std::string& path) {
  auto params = model.named_params();
  const std::uint32_t count = r.u32();
  if (count != params.size())
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(params.size()) + ": " + path);
  for (auto& p : params) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    if (name != p.name)
      throw DataError("checkpoint tensor '" + name + "' does not match expected '" + p.name +
                      "': " + path);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != p.tensor.shape())
      throw DataError("checkpoint tensor " + name + " shape " + shape_str(shape) +
                      " does not match model shape " + shape_str(p.tensor.shape()) + ": " + path);
    for (std::size_t e = 0; e < p.tensor.size(); ++e) p.tensor(e) = static_cast<T>(r.f32());
  }
  if (!r.exhausted()) throw DataError("trailing bytes in checkpoint: " + path);
}

inline CkptReader open_checkpoint(const std::string& path, ModelConfig& cfg,
                                  std::vector<std::string>& classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  CkptReader r(ss.str(), path);
  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kCkptMagic, 4) != 0)
    throw DataError("corrupt checkpoint (bad magic): " + path);
  const std::uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const std::uint32_t blob_len = r.u32();
  parse_config_blob(r.bytes(blob_len), cfg, classes);
  return r;
}

}  // namespace detail

template <typename T>
Model<T> load_checkpoint_as(const std::string& path) {
  ModelConfig cfg;
  std::vector<std::string> classes;
  detail::CkptReader r = detail::open_checkpoint(path, cfg, classes);
  Model<T> model = build_model<T>(cfg, 0);
  model.class_names = classes;
  detail::load_params_from(r, model, path);
  return model;
}

inline Model<float> load_checkpoint(const std::string& path) {
  return load_checkpoint_as<float>(path);
}

// Load into an existing model; its config must match the stored one.
template <typename T>
void load_checkpoint_into(Model<T>& model, const std::string& path) {
  ModelConfig cfg;
  std::vector<std::string> classes;
  detail::CkptReader r = detail::open_checkpoint(path, cfg, classes);
  const ModelConfig& m = model.cfg;
  if (cfg.arch != m.arch || cfg.seq_len != m.seq_len || cfg.features != m.features ||
      cfg.num_classes != m.num_classes || cfg.lstm_units != m.lstm_units ||
      cfg.head_hidden != m.head_hidden || cfg.conv_blocks != m.conv_blocks ||
      cfg.transformer_blocks != m.transformer_blocks || cfg.d_model != m.d_model ||
      cfg.heads != m.heads || cfg.expand_ratio != m.expand_ratio ||
      cfg.ffn_width() != m.ffn_width() || cfg.k_eca != m.k_eca)
    throw ConfigError("checkpoint config mismatch: stored " + std::string(arch_name(cfg.arch)) +
                      " model does not match target " + arch_name(m.arch) + " config: " + path);
  model.class_names = classes;
  detail::load_params_from(r, model, path);
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitResult {
  std::vector<TrainLogRow> history;
  std::string best_checkpoint;
  std::string final_checkpoint;
  double best_val_acc = 0.0;
  std::size_t best_epoch = 0;  // 1-based; 0 means never improved
  bool early_stopped = false;
  bool swa_applied = false;
};

namespace detail {

template <typename T>
int argmax_row(const Tensor<T>& m, std::size_t row) {
  const std::size_t C = m.dim(1);
  const T* p = m.data().data() + row * C;
  int best = 0;
  for (std::size_t c = 1; c < C; ++c)
    if (p[c] > p[best]) best = static_cast<int>(c);  // ties keep the lowest id
  return best;
}

// infer-mode pass over a dataset; returns (mean loss, accuracy)
template <typename T>
std::pair<double, double> eval_pass(Model<T>& model, const Dataset& ds, std::size_t batch_size) {
  NoGradGuard no_grad;
  const Mode saved = model.mode;
  model.mode = Mode::infer;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t end = std::min(ds.samples.size(), start + batch_size);
    std::vector<const KeypointSequence*> ptrs;
    ptrs.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&ds.samples[i]);
    PaddedBatch<T> batch = pad_and_mask<T>(ptrs, model.cfg.seq_len);
    Tensor<T> logits = model.forward_logits(batch.values, batch.mask);
    Tensor<T> loss = cross_entropy_logits(logits, batch.labels);
    loss_sum += static_cast<double>(loss(0)) * static_cast<double>(end - start);
    for (std::size_t r = 0; r < batch.labels.size(); ++r)
      if (argmax_row(logits, r) == batch.labels[r]) ++correct;
  }
  model.mode = saved;
  const double n = static_cast<double>(ds.samples.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

}  // namespace detail

template <typename T>
FitResult fit(Model<T>& model, const Dataset& train_raw, const Dataset& val_raw,
              const TrainConfig& cfg) {
  cfg.validate();
  if (train_raw.samples.empty() || val_raw.samples.empty())
    throw DataError("fit: train and validation datasets must be non-empty");
  if (cfg.checkpoint_dir.empty()) throw ConfigError("fit: checkpoint_dir must be set");
  std::filesystem::create_directories(cfg.checkpoint_dir);
  if (model.class_names.empty()) model.class_names = train_raw.class_names;

  // normalization statistics come from the training split only and travel
  // with the model from here on
  Dataset train = train_raw;
  Dataset val = val_raw;
  if (cfg.normalize == NormScheme::zscore) {
    const NormStats stats = compute_norm_stats(train_raw);
    for (std::size_t f = 0; f < stats.mean.size(); ++f) {
      model.norm_mean(f) = static_cast<T>(stats.mean[f]);
      model.norm_std(f) = static_cast<T>(stats.stdev[f]);
    }
    normalize_in_place(train, NormScheme::zscore, stats);
    normalize_in_place(val, NormScheme::zscore, stats);
  }

  const std::size_t n = train.samples.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t swa_start_epoch =
      static_cast<std::size_t>(std::floor(cfg.swa_start_fraction * static_cast<double>(cfg.epochs)));

  auto trainable = model.trainable_params();
  RAdam<T> radam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Lookahead<T> lookahead(cfg.lookahead_k, cfg.lookahead_alpha);
  if (cfg.lookahead) lookahead.init(trainable);
  SwaAverager<T> swa;

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::trunc);
    if (!log) throw DataError("fit: cannot write training log: " + cfg.log_path);
    log << "epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds\n";
  }

  FitResult result;
  result.best_checkpoint = (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string();
  result.final_checkpoint = (std::filesystem::path(cfg.checkpoint_dir) / "final.ckpt").string();

  std::vector<std::size_t> order(n);
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream(derive_seed(cfg.seed, "shuffle", epoch)).shuffle(order);

    const double epoch_lr = lr_schedule(global_step, total_steps, cfg);
    model.mode = Mode::train;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<KeypointSequence> augmented;
      std::vector<const KeypointSequence*> ptrs;
      ptrs.reserve(end - start);
      if (cfg.augment.enabled()) {
        augmented.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) {
          RngStream rng(derive_seed(cfg.seed, "augment", epoch, order[i]));
          augmented.push_back(augment(train.samples[order[i]], rng, cfg.augment));
        }
        for (const auto& s : augmented) ptrs.push_back(&s);
      } else {
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&train.samples[order[i]]);
      }
      PaddedBatch<T> batch = pad_and_mask<T>(ptrs, model.cfg.seq_len);

      Tensor<T> logits = model.forward_logits(batch.values, batch.mask,
                                              derive_seed(cfg.seed, "forward", epoch, start));
      Tensor<T> loss = cross_entropy_logits(logits, batch.labels);
      if (!std::isfinite(static_cast<double>(loss(0))))
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           ", batch starting " + std::to_string(start));
      model.zero_grads();
      loss.backward();
      const double lr = lr_schedule(global_step, total_steps, cfg);
      radam.step(trainable, lr);
      if (cfg.lookahead) lookahead.after_step(trainable);
      ++global_step;

      loss_sum += static_cast<double>(loss(0)) * static_cast<double>(end - start);
      for (std::size_t r = 0; r < batch.labels.size(); ++r)
        if (detail::argmax_row(logits, r) == batch.labels[r]) ++correct;
    }

    auto [val_loss, val_acc] = detail::eval_pass(model, val, cfg.batch_size);
    model.mode = Mode::infer;

    TrainLogRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    row.val_loss = val_loss;
    row.val_acc = val_acc;
    row.lr = epoch_lr;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(row);
    if (log) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", row.epoch,
                    row.train_loss, row.train_acc, row.val_loss, row.val_acc, row.lr,
                    row.wall_seconds);
      log << buf;
      log.flush();
    }

    // best-model checkpoint on validation accuracy; ties keep the earlier epoch
    if (result.best_epoch == 0 || val_acc > result.best_val_acc) {
      result.best_val_acc = val_acc;
      result.best_epoch = epoch + 1;
      save_checkpoint(model, result.best_checkpoint);
    }
    if (cfg.swa && epoch >= swa_start_epoch) swa.update(trainable);
    if (early_stop_check(result.history, cfg.early_stop) == StopDecision::stop) {
      result.early_stopped = true;
      break;
    }
  }

  // final weights: SWA mean (with recalibrated batch-norm statistics) when
  // snapshots exist, otherwise the last epoch's weights
  if (cfg.swa && swa.count() > 0) {
    swa.write_to(trainable);
    model.begin_bn_calibration();
    model.mode = Mode::train;
    {
      NoGradGuard no_grad;
      for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::size_t end = std::min(n, start + cfg.batch_size);
        std::vector<const KeypointSequence*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&train.samples[i]);
        PaddedBatch<T> batch = pad_and_mask<T>(ptrs, model.cfg.seq_len);
        model.forward_logits(batch.values, batch.mask, derive_seed(cfg.seed, "bn_recal", start));
      }
    }
    model.end_bn_calibration();
    model.mode = Mode::infer;
    result.swa_applied = true;
  }
  save_checkpoint(model, result.final_checkpoint);

  // the best weights seen during training are what the caller evaluates
  load_checkpoint_into(model, result.best_checkpoint);
  return result;
}

}  // namespace signseq
