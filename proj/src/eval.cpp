#include "signseq/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace signseq {

EvalReport report_from_predictions(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                   const std::vector<std::string>& class_names) {
  if (y_true.size() != y_pred.size())
    throw ShapeError("report: " + std::to_string(y_true.size()) + " labels vs " +
                     std::to_string(y_pred.size()) + " predictions");
  if (y_true.empty()) throw DataError("report: no predictions");
  const std::size_t C = class_names.size();
  EvalReport rep;
  rep.class_names = class_names;
  rep.confusion.assign(C * C, 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || static_cast<std::size_t>(t) >= C || p < 0 || static_cast<std::size_t>(p) >= C)
      throw DataError("report: label/prediction outside class table at index " +
                      std::to_string(i));
    ++rep.confusion[static_cast<std::size_t>(t) * C + static_cast<std::size_t>(p)];
  }
  rep.per_class.resize(C);
  std::size_t trace = 0;
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < C; ++j) {
      row += rep.confusion[c * C + j];
      col += rep.confusion[j * C + c];
    }
    const std::size_t tp = rep.confusion[c * C + c];
    trace += tp;
    ClassMetrics m;
    m.support = row;
    m.precision = col == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(col);
    m.recall = row == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(row);
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    f1_sum += m.f1;
    rep.per_class[c] = m;
  }
  rep.overall_accuracy = static_cast<double>(trace) / static_cast<double>(y_true.size());
  rep.macro_f1 = f1_sum / static_cast<double>(C);
  return rep;
}

std::size_t worker_threads() {
  const char* env = std::getenv("SIGNSEQ_THREADS");
  if (!env) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v < 1 ? 1 : static_cast<std::size_t>(v);
}

BenchResult benchmark_fps(const std::function<void()>& run_once, std::size_t warmup,
                          std::size_t measured, const std::string& name,
                          const std::string& hardware_note) {
  if (measured < 30)
    throw ConfigError("benchmark_fps: need at least 30 measured iterations, got " +
                      std::to_string(measured));
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) run_once();
  BenchResult r;
  r.model_name = name;
  r.hardware_note = hardware_note;
  r.warmup = warmup;
  r.measured = measured;
  r.latencies.resize(measured);
  for (std::size_t i = 0; i < measured; ++i) {
    const auto t0 = clock::now();
    run_once();
    r.latencies[i] = std::chrono::duration<double>(clock::now() - t0).count();
  }
  std::vector<double> sorted = r.latencies;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : sorted) sum += v;
  r.mean_latency = sum / static_cast<double>(measured);
  r.median_latency = sorted[measured / 2];
  r.p95_latency = sorted[std::min(measured - 1, static_cast<std::size_t>(
                                                    0.95 * static_cast<double>(measured)))];
  r.average_fps = 1.0 / r.mean_latency;
  return r;
}

ReportFormat report_format_from_name(const std::string& s) {
  if (s == "text") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + s + "' (expected text, csv, or json)");
}

namespace {

nlohmann::json report_to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["overall_accuracy"] = rep.overall_accuracy;
  j["macro_f1"] = rep.macro_f1;
  j["total"] = rep.total();
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < rep.num_classes(); ++c) {
    classes.push_back({{"class", rep.class_names[c]},
                       {"precision", rep.per_class[c].precision},
                       {"recall", rep.per_class[c].recall},
                       {"f1", rep.per_class[c].f1},
                       {"support", rep.per_class[c].support}});
  }
  j["classes"] = classes;
  nlohmann::json confusion = nlohmann::json::array();
  for (std::size_t t = 0; t < rep.num_classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < rep.num_classes(); ++p) row.push_back(rep.at(t, p));
    confusion.push_back(row);
  }
  j["confusion_matrix"] = confusion;
  return j;
}

}  // namespace

std::string render_report(const EvalReport& rep, ReportFormat format) {
  switch (format) {
    case ReportFormat::csv: {
      std::ostringstream out;
      out << "class,precision,recall,f1,support\n";
      char buf[256];
      for (std::size_t c = 0; c < rep.num_classes(); ++c) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%zu\n", rep.class_names[c].c_str(),
                      rep.per_class[c].precision, rep.per_class[c].recall, rep.per_class[c].f1,
                      rep.per_class[c].support);
        out << buf;
      }
      return out.str();
    }
    case ReportFormat::json:
      return report_to_json(rep).dump(2) + "\n";
    case ReportFormat::text: {
      std::ostringstream out;
      std::size_t width = 5;
      for (const auto& n : rep.class_names) width = std::max(width, n.size());
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%-*s %9s %9s %9s %9s\n", static_cast<int>(width), "class",
                    "precision", "recall", "f1", "support");
      out << buf;
      for (std::size_t c = 0; c < rep.num_classes(); ++c) {
        std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f %9zu\n", static_cast<int>(width),
                      rep.class_names[c].c_str(), rep.per_class[c].precision,
                      rep.per_class[c].recall, rep.per_class[c].f1, rep.per_class[c].support);
        out << buf;
      }
      std::snprintf(buf, sizeof(buf), "\naccuracy %.4f   macro F1 %.4f   samples %zu\n",
                    rep.overall_accuracy, rep.macro_f1, rep.total());
      out << buf;
      return out.str();
    }
  }
  throw ConfigError("render_report: unknown format");
}

std::string render_bench(const std::vector<BenchResult>& results, ReportFormat format) {
  switch (format) {
    case ReportFormat::json: {
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : results) {
        j.push_back({{"model", r.model_name},
                     {"hardware_note", r.hardware_note},
                     {"warmup", r.warmup},
                     {"measured", r.measured},
                     {"mean_latency_s", r.mean_latency},
                     {"median_latency_s", r.median_latency},
                     {"p95_latency_s", r.p95_latency},
                     {"average_fps", r.average_fps},
                     {"latency_samples_s", r.latencies}});
      }
      return j.dump(2) + "\n";
    }
    case ReportFormat::csv: {
      std::ostringstream out;
      out << "model,mean_latency_s,median_latency_s,p95_latency_s,average_fps,measured\n";
      char buf[256];
      for (const auto& r : results) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g,%zu\n", r.model_name.c_str(),
                      r.mean_latency, r.median_latency, r.p95_latency, r.average_fps, r.measured);
        out << buf;
      }
      return out.str();
    }
    case ReportFormat::text: {
      std::ostringstream out;
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%-10s %12s %12s %12s %12s\n", "model", "mean ms",
                    "median ms", "p95 ms", "avg FPS");
      out << buf;
      for (const auto& r : results) {
        std::snprintf(buf, sizeof(buf), "%-10s %12.3f %12.3f %12.3f %12.1f\n",
                      r.model_name.c_str(), r.mean_latency * 1e3, r.median_latency * 1e3,
                      r.p95_latency * 1e3, r.average_fps);
        out << buf;
      }
      if (results.size() == 2) {
        const bool first_faster = results[0].average_fps > results[1].average_fps;
        std::snprintf(buf, sizeof(buf), "\n%s is faster (%.1f vs %.1f FPS)\n",
                      results[first_faster ? 0 : 1].model_name.c_str(),
                      results[first_faster ? 0 : 1].average_fps,
                      results[first_faster ? 1 : 0].average_fps);
        out << buf;
      }
      if (!results.empty() && !results[0].hardware_note.empty())
        out << "note: " << results[0].hardware_note << "\n";
      return out.str();
    }
  }
  throw ConfigError("render_bench: unknown format");
}

}  // namespace signseq
