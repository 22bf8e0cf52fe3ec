#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "signseq/eval.hpp"
#include "signseq/train.hpp"

using namespace signseq;

TEST_CASE("report: perfect and degenerate predictors") {
  std::vector<std::string> names{"a", "b", "c"};
  {
    std::vector<int> y{0, 1, 2, 0, 1, 2};
    EvalReport rep = report_from_predictions(y, y, names);
    CHECK(rep.overall_accuracy == 1.0);
    CHECK(rep.macro_f1 == 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(rep.per_class[c].f1 == 1.0);
      CHECK(rep.at(c, c) == 2);
    }
    CHECK(rep.total() == 6);
  }
  {
    // everything predicted as class 0 on a balanced 2-class set
    std::vector<int> truth{0, 0, 1, 1};
    std::vector<int> pred{0, 0, 0, 0};
    EvalReport rep = report_from_predictions(truth, pred, {"x", "y"});
    CHECK(rep.overall_accuracy == doctest::Approx(0.5));
    CHECK(rep.per_class[1].recall == 0.0);
    CHECK(rep.per_class[1].precision == 0.0);
    CHECK(rep.per_class[1].f1 == 0.0);  // 0/0 handled as 0
    CHECK(rep.per_class[0].precision == doctest::Approx(0.5));
    CHECK(rep.per_class[0].recall == doctest::Approx(1.0));
  }
}

TEST_CASE("report: fixed 3-class confusion-matrix fixture to 1e-9") {
  // confusion [[2,1,0],[0,2,0],[1,0,4]]
  std::vector<int> truth{0, 0, 0, 1, 1, 2, 2, 2, 2, 2};
  std::vector<int> pred{0, 0, 1, 1, 1, 0, 2, 2, 2, 2};
  EvalReport rep = report_from_predictions(truth, pred, {"c0", "c1", "c2"});
  REQUIRE(rep.num_classes() == 3);
  CHECK(rep.at(0, 0) == 2);
  CHECK(rep.at(0, 1) == 1);
  CHECK(rep.at(1, 1) == 2);
  CHECK(rep.at(2, 0) == 1);
  CHECK(rep.at(2, 2) == 4);

  // hand-computed metrics
  CHECK(rep.per_class[0].precision == doctest::Approx(2.0 / 3).epsilon(1e-9));
  CHECK(rep.per_class[0].recall == doctest::Approx(2.0 / 3).epsilon(1e-9));
  CHECK(rep.per_class[0].f1 == doctest::Approx(2.0 / 3).epsilon(1e-9));
  CHECK(rep.per_class[1].precision == doctest::Approx(2.0 / 3).epsilon(1e-9));
  CHECK(rep.per_class[1].recall == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rep.per_class[1].f1 == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(rep.per_class[2].precision == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rep.per_class[2].recall == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(rep.per_class[2].f1 == doctest::Approx(8.0 / 9).epsilon(1e-9));
  CHECK(rep.overall_accuracy == doctest::Approx(0.8).epsilon(1e-9));
  // row sums equal support
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t row = 0;
    for (std::size_t p = 0; p < 3; ++p) row += rep.at(c, p);
    CHECK(row == rep.per_class[c].support);
  }
}

TEST_CASE("micro recall equals overall accuracy on random prediction sets") {
  RngStream rng(505);
  for (int rep_i = 0; rep_i < 50; ++rep_i) {
    const std::size_t C = 2 + rng.below(6);
    const std::size_t N = 20 + rng.below(100);
    std::vector<int> truth(N), pred(N);
    for (std::size_t i = 0; i < N; ++i) {
      truth[i] = static_cast<int>(rng.below(C));
      pred[i] = static_cast<int>(rng.below(C));
    }
    std::vector<std::string> names(C);
    for (std::size_t c = 0; c < C; ++c) names[c] = "k" + std::to_string(c);
    EvalReport rep = report_from_predictions(truth, pred, names);
    // micro recall = sum(tp) / sum(support) = trace / total
    double tp = 0, support = 0;
    for (std::size_t c = 0; c < C; ++c) {
      tp += static_cast<double>(rep.at(c, c));
      support += static_cast<double>(rep.per_class[c].support);
    }
    CHECK(tp / support == doctest::Approx(rep.overall_accuracy).epsilon(1e-12));
    CHECK(rep.total() == N);

    // brute-force per-class f1 agreement
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t tp_c = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const bool t = truth[i] == static_cast<int>(c);
        const bool p = pred[i] == static_cast<int>(c);
        tp_c += t && p;
        fp += !t && p;
        fn += t && !p;
      }
      const double prec = tp_c + fp == 0 ? 0.0 : double(tp_c) / double(tp_c + fp);
      const double rec = tp_c + fn == 0 ? 0.0 : double(tp_c) / double(tp_c + fn);
      const double f1 = prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
      CHECK(std::abs(rep.per_class[c].f1 - f1) < 1e-9);
    }
  }
}

TEST_CASE("evaluate: deterministic and thread-count independent") {
  Dataset ds = synth_generate(4, 6, 10, 5, 99, 0.05);
  ModelConfig cfg;
  cfg.arch = ArchKind::cnntrans;
  cfg.seq_len = 10;
  cfg.features = 5;
  cfg.num_classes = 4;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.conv_blocks = 1;
  Model<float> model = build_model<float>(cfg, 7);
  model.mode = Mode::infer;

  EvalReport a = evaluate(model, ds, 8);
  EvalReport b = evaluate(model, ds, 8);
  CHECK(a.confusion == b.confusion);
  CHECK(a.overall_accuracy == b.overall_accuracy);

  // same result with evaluation parallelism enabled
  ::setenv("SIGNSEQ_THREADS", "4", 1);
  EvalReport c = evaluate(model, ds, 4);
  ::unsetenv("SIGNSEQ_THREADS");
  EvalReport d = evaluate(model, ds, 4);
  CHECK(c.confusion == a.confusion);
  CHECK(d.confusion == a.confusion);

  Dataset empty;
  empty.class_names = ds.class_names;
  CHECK_THROWS_AS(evaluate(model, empty), DataError);
}

TEST_CASE("render: text ordering, csv re-parse, json fields") {
  std::vector<int> truth{0, 0, 1, 1, 2};
  std::vector<int> pred{0, 1, 1, 1, 0};
  EvalReport rep = report_from_predictions(truth, pred, {"alpha", "beta", "gamma"});

  const std::string text = render_report(rep, ReportFormat::text);
  const std::size_t p_alpha = text.find("alpha");
  const std::size_t p_beta = text.find("beta");
  const std::size_t p_gamma = text.find("gamma");
  CHECK(p_alpha < p_beta);
  CHECK(p_beta < p_gamma);

  // csv round-trips numerically
  const std::string csv = render_report(rep, ReportFormat::csv);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "class,precision,recall,f1,support");
  std::size_t row = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string cls, prec, rec, f1, support;
    std::getline(ls, cls, ',');
    std::getline(ls, prec, ',');
    std::getline(ls, rec, ',');
    std::getline(ls, f1, ',');
    std::getline(ls, support, ',');
    CHECK(cls == rep.class_names[row]);
    CHECK(std::stod(prec) == doctest::Approx(rep.per_class[row].precision).epsilon(1e-9));
    CHECK(std::stod(rec) == doctest::Approx(rep.per_class[row].recall).epsilon(1e-9));
    CHECK(std::stod(f1) == doctest::Approx(rep.per_class[row].f1).epsilon(1e-9));
    CHECK(std::stoul(support) == rep.per_class[row].support);
    ++row;
  }
  CHECK(row == 3);

  // json carries the full confusion matrix and matches the report
  const std::string js = render_report(rep, ReportFormat::json);
  auto j = nlohmann::json::parse(js);
  CHECK(j["overall_accuracy"].get<double>() ==
        doctest::Approx(rep.overall_accuracy).epsilon(1e-12));
  REQUIRE(j["confusion_matrix"].size() == 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p)
      CHECK(j["confusion_matrix"][t][p].get<std::size_t>() == rep.at(t, p));
  CHECK(j["classes"].size() == 3);

  CHECK_THROWS_AS(report_format_from_name("yaml"), ConfigError);
}

TEST_CASE("benchmark_fps: controlled-latency oracle and constraints") {
  // stub workload: busy-wait 10 ms -> about 100 fps
  auto busy_wait = [] {
    const auto t0 = std::chrono::steady_clock::now();
    while (std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 0.010) {
    }
  };
  BenchResult r = benchmark_fps(busy_wait, 3, 30, "stub");
  CHECK(r.average_fps == doctest::Approx(100.0).epsilon(0.10));
  CHECK(r.latencies.size() == 30);
  CHECK(r.measured == 30);
  CHECK(r.average_fps > 0);

  // repeating the benchmark stays within 20% on the same machine
  BenchResult r2 = benchmark_fps(busy_wait, 0, 30, "stub");
  CHECK(r2.average_fps == doctest::Approx(r.average_fps).epsilon(0.2));

  CHECK_THROWS_AS(benchmark_fps(busy_wait, 0, 29, "stub"), ConfigError);

  // bench json parses and carries the raw samples
  const std::string js = render_bench({r}, ReportFormat::json);
  auto j = nlohmann::json::parse(js);
  REQUIRE(j.size() == 1);
  CHECK(j[0]["latency_samples_s"].size() == 30);
  CHECK(j[0]["average_fps"].get<double>() == doctest::Approx(r.average_fps).epsilon(1e-9));
}
