// signseq command line: gen | train | eval | bench | gradcheck
//
// Every run is reproducible from its flags: all randomness flows from --seed
// through named streams. Config precedence is defaults < --config file <
// explicit flags; the resolved configuration is echoed into the output
// directory as effective_config.txt.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "signseq/eval.hpp"
#include "signseq/gradcheck_suite.hpp"
#include "signseq/train.hpp"

namespace fs = std::filesystem;
using namespace signseq;

namespace {

struct TrainOptions {
  std::string arch = "lstm";
  std::string data;
  std::string out_dir;
  std::string config_file;
  double val_fraction = 0.2;
  std::size_t max_len = 0;  // 0 = longest sequence in the dataset
  TrainConfig train;
  ModelConfig model;
  bool epochs_set = false;
  bool decay_set = false;
  bool swa_set = false;
};

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void apply_config_file(TrainOptions& o, const std::map<std::string, std::string>& kv) {
  auto u = [](const std::string& v) { return static_cast<std::size_t>(std::stoul(v)); };
  auto d = [](const std::string& v) { return std::stod(v); };
  auto b = [](const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("expected boolean, got '" + v + "'");
  };
  for (const auto& [k, v] : kv) {
    if (k == "arch") o.arch = v;
    else if (k == "epochs") { o.train.epochs = u(v); o.epochs_set = true; }
    else if (k == "batch_size") o.train.batch_size = u(v);
    else if (k == "lr_start") o.train.lr_start = d(v);
    else if (k == "lr_min") o.train.lr_min = d(v);
    else if (k == "weight_decay") o.train.weight_decay = d(v);
    else if (k == "decay_type") { o.train.decay_type = decay_from_name(v); o.decay_set = true; }
    else if (k == "seed") o.train.seed = std::stoull(v);
    else if (k == "swa") { o.train.swa = b(v); o.swa_set = true; }
    else if (k == "swa_start_fraction") o.train.swa_start_fraction = d(v);
    else if (k == "early_stop_enabled") o.train.early_stop.enabled = b(v);
    else if (k == "early_stop_patience") o.train.early_stop.patience = u(v);
    else if (k == "early_stop_min_delta") o.train.early_stop.min_delta = d(v);
    else if (k == "early_stop_literal_paper") o.train.early_stop.literal_paper = b(v);
    else if (k == "lookahead") o.train.lookahead = b(v);
    else if (k == "lookahead_k") o.train.lookahead_k = u(v);
    else if (k == "lookahead_alpha") o.train.lookahead_alpha = d(v);
    else if (k == "normalize")
      o.train.normalize = v == "none" ? NormScheme::none : NormScheme::zscore;
    else if (k == "augment_max_shift") o.train.augment.max_shift = static_cast<int>(std::stol(v));
    else if (k == "augment_jitter_sigma") o.train.augment.jitter_sigma = d(v);
    else if (k == "augment_frame_dropout") o.train.augment.frame_dropout = d(v);
    else if (k == "val_fraction") o.val_fraction = d(v);
    else if (k == "max_len") o.max_len = u(v);
    else if (k == "lstm_units") o.model.lstm_units = u(v);
    else if (k == "head_hidden") o.model.head_hidden = u(v);
    else if (k == "dropout") o.model.dropout = d(v);
    else if (k == "conv_blocks") o.model.conv_blocks = u(v);
    else if (k == "transformer_blocks") o.model.transformer_blocks = u(v);
    else if (k == "d_model") o.model.d_model = u(v);
    else if (k == "heads") o.model.heads = u(v);
    else if (k == "expand_ratio") o.model.expand_ratio = u(v);
    else if (k == "ffn_hidden") o.model.ffn_hidden = u(v);
    else if (k == "k_eca") o.model.k_eca = u(v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
}

void write_effective_config(const TrainOptions& o, const Dataset& ds,
                            const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  out << "arch=" << o.arch << "\n"
      << "epochs=" << o.train.epochs << "\n"
      << "batch_size=" << o.train.batch_size << "\n"
      << "lr_start=" << o.train.lr_start << "\n"
      << "lr_min=" << o.train.lr_min << "\n"
      << "weight_decay=" << o.train.weight_decay << "\n"
      << "decay_type=" << decay_name(o.train.decay_type) << "\n"
      << "seed=" << o.train.seed << "\n"
      << "swa=" << (o.train.swa ? "true" : "false") << "\n"
      << "swa_start_fraction=" << o.train.swa_start_fraction << "\n"
      << "early_stop_enabled=" << (o.train.early_stop.enabled ? "true" : "false") << "\n"
      << "early_stop_patience=" << o.train.early_stop.patience << "\n"
      << "early_stop_min_delta=" << o.train.early_stop.min_delta << "\n"
      << "early_stop_literal_paper=" << (o.train.early_stop.literal_paper ? "true" : "false")
      << "\n"
      << "lookahead=" << (o.train.lookahead ? "true" : "false") << "\n"
      << "lookahead_k=" << o.train.lookahead_k << "\n"
      << "lookahead_alpha=" << o.train.lookahead_alpha << "\n"
      << "normalize=" << (o.train.normalize == NormScheme::none ? "none" : "zscore") << "\n"
      << "augment_max_shift=" << o.train.augment.max_shift << "\n"
      << "augment_jitter_sigma=" << o.train.augment.jitter_sigma << "\n"
      << "augment_frame_dropout=" << o.train.augment.frame_dropout << "\n"
      << "val_fraction=" << o.val_fraction << "\n"
      << "max_len=" << o.model.seq_len << "\n"
      << "features=" << o.model.features << "\n"
      << "num_classes=" << ds.num_classes() << "\n"
      << "lstm_units=" << o.model.lstm_units << "\n"
      << "head_hidden=" << o.model.head_hidden << "\n"
      << "dropout=" << o.model.dropout << "\n"
      << "conv_blocks=" << o.model.conv_blocks << "\n"
      << "transformer_blocks=" << o.model.transformer_blocks << "\n"
      << "d_model=" << o.model.d_model << "\n"
      << "heads=" << o.model.heads << "\n"
      << "expand_ratio=" << o.model.expand_ratio << "\n"
      << "ffn_hidden=" << o.model.ffn_width() << "\n"
      << "k_eca=" << o.model.k_eca << "\n";
}

int cmd_train(TrainOptions& o) {
  o.model.arch = arch_from_name(o.arch);
  // architecture-dependent defaults unless pinned by file or flag
  if (!o.epochs_set) o.train.epochs = o.model.arch == ArchKind::lstm ? 200 : 150;
  if (!o.decay_set)
    o.train.decay_type = o.model.arch == ArchKind::lstm ? DecayType::cosine : DecayType::onecycle;
  if (!o.swa_set) o.train.swa = o.model.arch == ArchKind::cnntrans;

  Dataset ds = load_dataset(o.data);
  std::size_t longest = 0;
  for (const auto& s : ds.samples) longest = std::max<std::size_t>(longest, s.frames);
  o.model.seq_len = o.max_len ? o.max_len : longest;
  o.model.features = ds.features_per_frame();
  o.model.num_classes = ds.num_classes();

  fs::create_directories(o.out_dir);
  write_effective_config(o, ds, (fs::path(o.out_dir) / "effective_config.txt").string());

  auto [train_ds, val_ds] = split_train_val(ds, o.val_fraction, o.train.seed);
  std::printf("dataset: %zu samples, %zu classes, %zu features; split %zu train / %zu val\n",
              ds.samples.size(), ds.num_classes(), ds.features_per_frame(),
              train_ds.samples.size(), val_ds.samples.size());

  Model<float> model = build_model<float>(o.model, o.train.seed);
  model.class_names = ds.class_names;
  std::printf("%s model: %zu trainable parameters, seq_len %zu\n", o.arch.c_str(),
              model.num_trainable(), o.model.seq_len);

  o.train.checkpoint_dir = o.out_dir;
  o.train.log_path = (fs::path(o.out_dir) / "train_log.csv").string();
  const FitResult r = fit(model, train_ds, val_ds, o.train);

  std::printf("trained %zu epoch(s)%s; best val accuracy %.4f at epoch %zu\n",
              r.history.size(), r.early_stopped ? " (early stopped)" : "", r.best_val_acc,
              r.best_epoch);
  std::printf("best checkpoint:  %s\nfinal checkpoint: %s%s\nlog: %s\n",
              r.best_checkpoint.c_str(), r.final_checkpoint.c_str(),
              r.swa_applied ? " (SWA)" : "", o.train.log_path.c_str());
  return 0;
}

int cmd_gen(std::size_t classes, std::size_t samples, std::size_t frames, std::size_t features,
            double noise, std::uint64_t seed, const std::string& out_dir) {
  Dataset ds = synth_generate(classes, samples, frames, features, seed, noise);
  const std::string manifest = save_dataset(ds, out_dir);
  std::printf("wrote %zu sequences (%zu classes x %zu samples, %zux%zu) to %s\n",
              ds.samples.size(), classes, samples, frames, features, out_dir.c_str());
  std::printf("manifest: %s\n", manifest.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest, const std::string& format,
             const std::string& out_path) {
  Model<float> model = load_checkpoint(ckpt);
  Dataset ds = load_dataset(manifest);
  if (!model.class_names.empty() && model.class_names != ds.class_names)
    throw ConfigError("class table mismatch between checkpoint (" +
                      std::to_string(model.class_names.size()) + " classes) and dataset (" +
                      std::to_string(ds.num_classes()) + " classes)");
  EvalReport rep = evaluate(model, ds);
  const std::string doc = render_report(rep, report_format_from_name(format));
  if (out_path.empty()) {
    std::fputs(doc.c_str(), stdout);
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    out << doc;
    std::printf("report written to %s\n", out_path.c_str());
  }
  return 0;
}

int cmd_bench(std::vector<std::string> ckpts, const std::string& arch, std::size_t seq,
              std::size_t features, std::size_t classes, std::size_t warmup,
              std::size_t repeats, std::uint64_t seed, const std::string& json_out,
              const std::string& note) {
  std::vector<BenchResult> results;
  auto bench_one = [&](Model<float>& m) {
    std::printf("benchmarking %s (seq %zu, features %zu) ...\n", arch_name(m.cfg.arch),
                m.cfg.seq_len, m.cfg.features);
    results.push_back(benchmark_model(m, warmup, repeats, seed, note));
  };
  if (!ckpts.empty()) {
    for (const auto& c : ckpts) {
      Model<float> m = load_checkpoint(c);
      bench_one(m);
    }
  } else {
    ModelConfig cfg;
    cfg.arch = arch_from_name(arch);
    cfg.seq_len = seq;
    cfg.features = features;
    cfg.num_classes = classes;
    Model<float> m = build_model<float>(cfg, seed);
    bench_one(m);
  }
  std::fputs(render_bench(results, ReportFormat::text).c_str(), stdout);
  if (!json_out.empty()) {
    std::ofstream out(json_out, std::ios::trunc);
    out << render_bench(results, ReportFormat::json);
    std::printf("bench JSON written to %s\n", json_out.c_str());
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, double epsilon) {
  std::vector<GradCheckEntry> entries;
  if (scope == "layers" || scope == "all") {
    auto v = run_layer_gradchecks(epsilon);
    entries.insert(entries.end(), v.begin(), v.end());
  }
  if (scope == "models" || scope == "all") {
    auto v = run_model_gradchecks(epsilon);
    entries.insert(entries.end(), v.begin(), v.end());
  }
  if (entries.empty()) throw ConfigError("gradcheck scope must be layers, models, or all");
  bool ok = true;
  std::printf("%-18s %14s %10s %8s  %s\n", "op", "max_rel_error", "tolerance", "checked",
              "status");
  for (const auto& e : entries) {
    std::printf("%-18s %14.3e %10.0e %8zu  %s\n", e.name.c_str(), e.max_rel_error, e.tolerance,
                e.checked, e.passed ? "pass" : "FAIL");
    ok = ok && e.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keypoint-sequence sign recognition engine"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic keypoint dataset");
  std::size_t g_classes = 50, g_samples = 139, g_frames = 50, g_features = 174;
  double g_noise = 0.05;
  std::uint64_t g_seed = 42;
  std::string g_out = "dataset";
  gen->add_option("--classes", g_classes, "number of classes");
  gen->add_option("--samples", g_samples, "samples per class");
  gen->add_option("--frames", g_frames, "frames per sample");
  gen->add_option("--features", g_features, "features per frame");
  gen->add_option("--noise", g_noise, "gaussian noise sigma");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset manifest");
  TrainOptions t;
  train->add_option("--arch", t.arch, "lstm or cnntrans")->required();
  train->add_option("--data", t.data, "dataset manifest path")->required();
  train->add_option("--out", t.out_dir, "output directory")->required();
  train->add_option("--config", t.config_file, "key=value config file");
  auto* f_epochs = train->add_option("--epochs", t.train.epochs, "epoch budget");
  train->add_option("--batch", t.train.batch_size, "batch size");
  train->add_option("--lr", t.train.lr_start, "start learning rate");
  train->add_option("--lr-min", t.train.lr_min, "minimum learning rate");
  train->add_option("--wd", t.train.weight_decay, "decoupled weight decay");
  std::string t_decay;
  auto* f_decay = train->add_option("--decay", t_decay, "cosine or onecycle");
  train->add_option("--seed", t.train.seed, "run seed");
  train->add_option("--val-fraction", t.val_fraction, "validation fraction");
  train->add_option("--max-len", t.max_len, "pad/truncate length (0 = dataset max)");
  bool t_swa = false, t_no_swa = false;
  train->add_flag("--swa", t_swa, "enable stochastic weight averaging");
  train->add_flag("--no-swa", t_no_swa, "disable stochastic weight averaging");
  bool t_no_early = false, t_literal = false;
  train->add_flag("--no-early-stop", t_no_early, "disable early stopping");
  train->add_flag("--literal-early-stop", t_literal,
                  "stop as soon as train loss exceeds val loss");
  train->add_option("--patience", t.train.early_stop.patience, "early stop patience");
  std::string t_norm;
  auto* f_norm = train->add_option("--normalize", t_norm, "none or zscore");
  train->add_option("--aug-shift", t.train.augment.max_shift, "augment: max temporal shift");
  train->add_option("--aug-jitter", t.train.augment.jitter_sigma, "augment: jitter sigma");
  train->add_option("--aug-frame-dropout", t.train.augment.frame_dropout,
                    "augment: frame dropout rate");
  train->add_option("--lstm-units", t.model.lstm_units, "LSTM units");
  train->add_option("--head-hidden", t.model.head_hidden, "classifier hidden width");
  train->add_option("--dropout", t.model.dropout, "dropout rate");
  train->add_option("--conv-blocks", t.model.conv_blocks, "conv block count");
  train->add_option("--transformer-blocks", t.model.transformer_blocks,
                    "transformer block count");
  train->add_option("--d-model", t.model.d_model, "model width");
  train->add_option("--heads", t.model.heads, "attention heads");
  train->add_option("--expand-ratio", t.model.expand_ratio, "conv block expand ratio");
  train->add_option("--ffn-hidden", t.model.ffn_hidden, "transformer FFN width");
  train->add_option("--k-eca", t.model.k_eca, "ECA kernel width");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_format = "text", e_out;
  ev->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
  ev->add_option("--data", e_data, "dataset manifest path")->required();
  ev->add_option("--format", e_format, "text, csv, or json");
  ev->add_option("--out", e_out, "write report to file instead of stdout");

  // bench
  auto* bench = app.add_subcommand("bench", "measure batch-1 inference latency");
  std::vector<std::string> b_ckpts;
  std::string b_arch = "lstm", b_json, b_note;
  std::size_t b_seq = 45, b_features = 174, b_classes = 50, b_warmup = 20, b_repeats = 100;
  std::uint64_t b_seed = 42;
  bench->add_option("--ckpt", b_ckpts, "checkpoint(s); two give a side-by-side table");
  bench->add_option("--arch", b_arch, "fresh-init arch when no checkpoint given");
  bench->add_option("--seq", b_seq, "sequence length for fresh-init model");
  bench->add_option("--features", b_features, "features for fresh-init model");
  bench->add_option("--classes", b_classes, "classes for fresh-init model");
  bench->add_option("--warmup", b_warmup, "untimed warmup iterations");
  bench->add_option("--repeats", b_repeats, "timed iterations (min 30)");
  bench->add_option("--seed", b_seed, "input seed");
  bench->add_option("--json", b_json, "also write JSON with raw latency samples");
  bench->add_option("--note", b_note, "hardware note recorded in the result");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient validation");
  std::string gc_scope = "all";
  double gc_eps = 1e-5;
  gc->add_option("--scope", gc_scope, "layers, models, or all");
  gc->add_option("--epsilon", gc_eps, "finite difference step");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(g_classes, g_samples, g_frames, g_features, g_noise,
                                      g_seed, g_out);
    if (train->parsed()) {
      // precedence: defaults < config file < explicit flags
      TrainOptions resolved;
      resolved.arch = t.arch;
      resolved.data = t.data;
      resolved.out_dir = t.out_dir;
      resolved.config_file = t.config_file;
      if (!t.config_file.empty())
        apply_config_file(resolved, read_config_file(t.config_file));
      auto take = [&](CLI::Option* opt, auto apply) {
        if (opt->count()) apply();
      };
      take(f_epochs, [&] { resolved.train.epochs = t.train.epochs; resolved.epochs_set = true; });
      take(train->get_option("--batch"), [&] { resolved.train.batch_size = t.train.batch_size; });
      take(train->get_option("--lr"), [&] { resolved.train.lr_start = t.train.lr_start; });
      take(train->get_option("--lr-min"), [&] { resolved.train.lr_min = t.train.lr_min; });
      take(train->get_option("--wd"), [&] { resolved.train.weight_decay = t.train.weight_decay; });
      take(f_decay, [&] {
        resolved.train.decay_type = decay_from_name(t_decay);
        resolved.decay_set = true;
      });
      take(train->get_option("--seed"), [&] { resolved.train.seed = t.train.seed; });
      take(train->get_option("--val-fraction"), [&] { resolved.val_fraction = t.val_fraction; });
      take(train->get_option("--max-len"), [&] { resolved.max_len = t.max_len; });
      if (t_swa || t_no_swa) {
        resolved.train.swa = t_swa && !t_no_swa;
        resolved.swa_set = true;
      }
      if (t_no_early) resolved.train.early_stop.enabled = false;
      if (t_literal) resolved.train.early_stop.literal_paper = true;
      take(train->get_option("--patience"),
           [&] { resolved.train.early_stop.patience = t.train.early_stop.patience; });
      take(f_norm, [&] {
        resolved.train.normalize = t_norm == "none" ? NormScheme::none : NormScheme::zscore;
      });
      take(train->get_option("--aug-shift"),
           [&] { resolved.train.augment.max_shift = t.train.augment.max_shift; });
      take(train->get_option("--aug-jitter"),
           [&] { resolved.train.augment.jitter_sigma = t.train.augment.jitter_sigma; });
      take(train->get_option("--aug-frame-dropout"),
           [&] { resolved.train.augment.frame_dropout = t.train.augment.frame_dropout; });
      take(train->get_option("--lstm-units"),
           [&] { resolved.model.lstm_units = t.model.lstm_units; });
      take(train->get_option("--head-hidden"),
           [&] { resolved.model.head_hidden = t.model.head_hidden; });
      take(train->get_option("--dropout"), [&] { resolved.model.dropout = t.model.dropout; });
      take(train->get_option("--conv-blocks"),
           [&] { resolved.model.conv_blocks = t.model.conv_blocks; });
      take(train->get_option("--transformer-blocks"),
           [&] { resolved.model.transformer_blocks = t.model.transformer_blocks; });
      take(train->get_option("--d-model"), [&] { resolved.model.d_model = t.model.d_model; });
      take(train->get_option("--heads"), [&] { resolved.model.heads = t.model.heads; });
      take(train->get_option("--expand-ratio"),
           [&] { resolved.model.expand_ratio = t.model.expand_ratio; });
      take(train->get_option("--ffn-hidden"),
           [&] { resolved.model.ffn_hidden = t.model.ffn_hidden; });
      take(train->get_option("--k-eca"), [&] { resolved.model.k_eca = t.model.k_eca; });
      return cmd_train(resolved);
    }
    if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_format, e_out);
    if (bench->parsed())
      return cmd_bench(b_ckpts, b_arch, b_seq, b_features, b_classes, b_warmup, b_repeats,
                       b_seed, b_json, b_note);
    if (gc->parsed()) return cmd_gradcheck(gc_scope, gc_eps);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
