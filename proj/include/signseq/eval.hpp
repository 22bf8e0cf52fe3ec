#pragma once

// Evaluation: accuracy, per-class classification report, confusion matrix,
// and the single-threaded batch-1 inference latency benchmark.

#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "signseq/data.hpp"
#include "signseq/model.hpp"

namespace signseq {

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  std::vector<std::size_t> confusion;  // row = true class, col = predicted
  double overall_accuracy = 0;
  double macro_f1 = 0;

  std::size_t num_classes() const { return per_class.size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (std::size_t v : confusion) n += v;
    return n;
  }
  std::size_t at(std::size_t true_c, std::size_t pred_c) const {
    return confusion[true_c * num_classes() + pred_c];
  }
};

EvalReport report_from_predictions(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                   const std::vector<std::string>& class_names);

// number of worker threads allowed for evaluation batching (SIGNSEQ_THREADS,
// default 1); benchmarks ignore this and always run single-threaded
std::size_t worker_threads();

struct BenchResult {
  std::string model_name;
  std::string hardware_note;
  std::size_t warmup = 0;
  std::size_t measured = 0;
  std::vector<double> latencies;  // seconds, measured iterations only
  double mean_latency = 0, median_latency = 0, p95_latency = 0;
  double average_fps = 0;
};

BenchResult benchmark_fps(const std::function<void()>& run_once, std::size_t warmup,
                          std::size_t measured, const std::string& name,
                          const std::string& hardware_note = "");

enum class ReportFormat { text, csv, json };

ReportFormat report_format_from_name(const std::string& s);
std::string render_report(const EvalReport& report, ReportFormat format);
std::string render_bench(const std::vector<BenchResult>& results, ReportFormat format);

// ---------------------------------------------------------------------------
// templates
// ---------------------------------------------------------------------------

// Argmax predictions over a dataset using the model's stored normalization
// stats. Evaluation may fan batches out across worker_threads(); aggregation
// order is fixed, so the report is identical at any thread count.
template <typename T>
std::vector<int> predict(Model<T>& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.samples.empty()) throw DataError("predict: empty dataset");
  const Mode saved_mode = model.mode;
  model.mode = Mode::infer;
  NormStats stats;
  stats.mean.resize(model.cfg.features);
  stats.stdev.resize(model.cfg.features);
  bool identity = true;
  for (std::size_t f = 0; f < model.cfg.features; ++f) {
    stats.mean[f] = static_cast<float>(model.norm_mean(f));
    stats.stdev[f] = static_cast<float>(model.norm_std(f));
    identity = identity && stats.mean[f] == 0.0f && stats.stdev[f] == 1.0f;
  }
  const NormScheme scheme = identity ? NormScheme::none : NormScheme::zscore;

  const std::size_t n = ds.samples.size();
  const std::size_t n_batches = (n + batch_size - 1) / batch_size;
  std::vector<int> preds(n, -1);

  auto run_range = [&](std::size_t first_batch, std::size_t last_batch) {
    NoGradGuard no_grad;
    for (std::size_t b = first_batch; b < last_batch; ++b) {
      const std::size_t start = b * batch_size;
      const std::size_t end = std::min(n, start + batch_size);
      std::vector<KeypointSequence> normed;
      std::vector<const KeypointSequence*> ptrs;
      normed.reserve(end - start);
      for (std::size_t i = start; i < end; ++i)
        normed.push_back(normalize(ds.samples[i], scheme, stats));
      for (const auto& s : normed) ptrs.push_back(&s);
      PaddedBatch<T> batch = pad_and_mask<T>(ptrs, model.cfg.seq_len);
      Tensor<T> probs = model.forward_probs(batch.values, batch.mask);
      const std::size_t C = probs.dim(1);
      for (std::size_t r = 0; r < end - start; ++r) {
        const T* p = probs.data().data() + r * C;
        int best = 0;
        for (std::size_t c = 1; c < C; ++c)
          if (p[c] > p[best]) best = static_cast<int>(c);  // ties keep the lowest id
        preds[start + r] = best;
      }
    }
  };

  const std::size_t threads = std::min(worker_threads(), n_batches);
  if (threads <= 1) {
    run_range(0, n_batches);
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (n_batches + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * per;
      const std::size_t hi = std::min(n_batches, lo + per);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  model.mode = saved_mode;
  return preds;
}

template <typename T>
EvalReport evaluate(Model<T>& model, const Dataset& ds, std::size_t batch_size = 64) {
  const std::vector<int> preds = predict(model, ds, batch_size);
  std::vector<int> truth(ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) truth[i] = ds.samples[i].label;
  std::vector<std::string> names = ds.class_names;
  if (names.empty()) names = model.class_names;
  return report_from_predictions(truth, preds, names);
}

// Times batch-1 forward passes over a fixed seeded input.
template <typename T>
BenchResult benchmark_model(Model<T>& model, std::size_t warmup, std::size_t measured,
                            std::uint64_t seed, const std::string& hardware_note = "") {
  Tensor<T> input({1, model.cfg.seq_len, model.cfg.features});
  RngStream rng(derive_seed(seed, "bench_input"));
  for (auto& v : input.vec()) v = static_cast<T>(rng.normal());
  SequenceMask mask = SequenceMask::all_valid(1, model.cfg.seq_len);
  const Mode saved = model.mode;
  model.mode = Mode::infer;
  NoGradGuard no_grad;
  BenchResult r = benchmark_fps([&] { model.forward_probs(input, mask); }, warmup, measured,
                                arch_name(model.cfg.arch), hardware_note);
  model.mode = saved;
  return r;
}

}  // namespace signseq
