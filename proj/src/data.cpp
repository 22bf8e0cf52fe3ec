#include "signseq/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace signseq {

namespace {

constexpr char kMagic[4] = {'K', 'S', 'Q', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    by_class[static_cast<std::size_t>(ds.samples[i].label)].push_back(i);
  return by_class;
}

}  // namespace

void Dataset::validate() const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.frames < 1) throw DataError("sample " + std::to_string(i) + " has no frames");
    if (s.values.size() != static_cast<std::size_t>(s.frames) * s.features)
      throw DataError("sample " + std::to_string(i) + " value count mismatch");
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= class_names.size())
      throw DataError("sample " + std::to_string(i) + " label " + std::to_string(s.label) +
                      " outside class table of size " + std::to_string(class_names.size()));
    if (s.features != samples[0].features)
      throw DataError("sample " + std::to_string(i) + " feature count differs");
    if (!all_finite(s.values))
      throw DataError("sample " + std::to_string(i) + " contains non-finite values");
  }
}

// --------------------------------------------------------------------------
// normalization
// --------------------------------------------------------------------------

NormStats compute_norm_stats(const Dataset& ds) {
  const std::size_t F = ds.features_per_frame();
  std::vector<double> sum(F, 0.0), sq(F, 0.0);
  std::size_t n = 0;
  for (const auto& s : ds.samples) {
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t f = 0; f < F; ++f) sum[f] += s.at(t, f);
    n += s.frames;
  }
  NormStats stats;
  stats.mean.resize(F);
  stats.stdev.resize(F);
  if (n == 0) throw DataError("compute_norm_stats: empty dataset");
  for (std::size_t f = 0; f < F; ++f) stats.mean[f] = static_cast<float>(sum[f] / n);
  for (const auto& s : ds.samples)
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const double d = s.at(t, f) - stats.mean[f];
        sq[f] += d * d;
      }
  for (std::size_t f = 0; f < F; ++f)
    stats.stdev[f] = static_cast<float>(std::sqrt(sq[f] / n));
  return stats;
}

KeypointSequence normalize(const KeypointSequence& seq, NormScheme scheme,
                           const NormStats& stats) {
  if (scheme == NormScheme::none) return seq;
  if (stats.mean.size() != seq.features)
    throw DataError("normalize: stats width " + std::to_string(stats.mean.size()) +
                    " does not match features " + std::to_string(seq.features));
  KeypointSequence out = seq;
  for (std::size_t t = 0; t < seq.frames; ++t)
    for (std::size_t f = 0; f < seq.features; ++f)
      out.at(t, f) = (seq.at(t, f) - stats.mean[f]) / std::max(stats.stdev[f], 1e-6f);
  return out;
}

void normalize_in_place(Dataset& ds, NormScheme scheme, const NormStats& stats) {
  if (scheme == NormScheme::none) return;
  for (auto& s : ds.samples) s = normalize(s, scheme, stats);
}

// --------------------------------------------------------------------------
// persistence
// --------------------------------------------------------------------------

void save_ksq(const std::string& path, const KeypointSequence& seq) {
  std::string buf;
  buf.reserve(12 + seq.values.size() * 4);
  buf.append(kMagic, 4);
  put_u32(buf, seq.frames);
  put_u32(buf, seq.features);
  for (float v : seq.values) put_f32(buf, v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("short write: " + path);
}

KeypointSequence load_ksq(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw DataError("bad magic in sequence file: " + path);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  KeypointSequence seq;
  seq.frames = get_u32(p + 4);
  seq.features = get_u32(p + 8);
  const std::size_t want = static_cast<std::size_t>(seq.frames) * seq.features;
  if (seq.frames < 1 || seq.features < 1)
    throw DataError("empty header in sequence file: " + path);
  if (buf.size() != 12 + want * 4)
    throw DataError("truncated sequence file (header " + std::to_string(seq.frames) + "x" +
                    std::to_string(seq.features) + ", got " +
                    std::to_string((buf.size() - 12) / 4) + " values): " + path);
  seq.values.resize(want);
  for (std::size_t i = 0; i < want; ++i) seq.values[i] = get_f32(p + 12 + i * 4);
  return seq;
}

std::string save_dataset(const Dataset& ds, const std::string& dir) {
  ds.validate();
  fs::create_directories(dir);
  {
    std::ofstream cls(fs::path(dir) / "classes.txt", std::ios::trunc);
    if (!cls) throw DataError("cannot write class table in " + dir);
    for (const auto& name : ds.class_names) cls << name << "\n";
  }
  std::ostringstream manifest;
  manifest << "path,label\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%05zu.ksq", i);
    save_ksq((fs::path(dir) / name).string(), ds.samples[i]);
    manifest << name << "," << ds.class_names[static_cast<std::size_t>(ds.samples[i].label)]
             << "\n";
  }
  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + manifest_path);
  out << manifest.str();
  return manifest_path;
}

Dataset load_dataset(const std::string& manifest_path) {
  const fs::path base = fs::path(manifest_path).parent_path();
  Dataset ds;
  {
    const fs::path cls_path = base / "classes.txt";
    std::ifstream cls(cls_path);
    if (!cls) throw DataError("cannot open class table: " + cls_path.string());
    std::string line;
    while (std::getline(cls, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) ds.class_names.push_back(line);
    }
    if (ds.class_names.empty()) throw DataError("empty class table: " + cls_path.string());
  }
  std::map<std::string, int> class_ids;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i)
    class_ids[ds.class_names[i]] = static_cast<int>(i);

  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest: " + manifest_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty manifest: " + manifest_path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,label")
    throw DataError("manifest header must be 'path,label', got '" + line + "' in " +
                    manifest_path);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw DataError("manifest line " + std::to_string(line_no) +
                      " is not 'path,label': " + line);
    const std::string rel = line.substr(0, comma);
    const std::string label = line.substr(comma + 1);
    auto it = class_ids.find(label);
    if (it == class_ids.end())
      throw DataError("unknown label '" + label + "' for file " + rel + " (line " +
                      std::to_string(line_no) + ")");
    KeypointSequence seq = load_ksq((base / rel).string());
    seq.label = it->second;
    if (!ds.samples.empty() && seq.features != ds.samples[0].features)
      throw DataError("feature count mismatch: " + rel + " has " +
                      std::to_string(seq.features) + " features, expected " +
                      std::to_string(ds.samples[0].features));
    ds.samples.push_back(std::move(seq));
  }
  ds.validate();
  return ds;
}

// --------------------------------------------------------------------------
// splits
// --------------------------------------------------------------------------

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction,
                                            std::uint64_t seed) {
  if (val_fraction <= 0 || val_fraction >= 1)
    throw ConfigError("split_train_val: fraction must be in (0, 1)");
  auto by_class = indices_by_class(ds);
  std::vector<bool> in_val(ds.samples.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2)
      throw DataError("split_train_val: class '" + ds.class_names[c] + "' has " +
                      std::to_string(idx.size()) + " sample(s); need at least 2");
    RngStream rng(derive_seed(seed, "split", c));
    rng.shuffle(idx);
    const std::size_t want = static_cast<std::size_t>(
        std::lround(val_fraction * static_cast<double>(idx.size())));
    const std::size_t val_n = std::clamp<std::size_t>(want, 1, idx.size() - 1);
    for (std::size_t i = 0; i < val_n; ++i) in_val[idx[i]] = true;
  }
  Dataset train, val;
  train.class_names = ds.class_names;
  val.class_names = ds.class_names;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    (in_val[i] ? val : train).samples.push_back(ds.samples[i]);
  return {std::move(train), std::move(val)};
}

std::vector<FoldIndices> kfold_split(const Dataset& ds, std::size_t n_splits,
                                     std::uint64_t seed) {
  if (n_splits < 2) throw ConfigError("kfold_split: need at least 2 splits");
  auto by_class = indices_by_class(ds);
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() < n_splits)
      throw DataError("kfold_split: class '" + ds.class_names[c] + "' has " +
                      std::to_string(by_class[c].size()) + " samples, fewer than " +
                      std::to_string(n_splits) + " splits");
  std::vector<std::vector<std::size_t>> fold_of(n_splits);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    RngStream rng(derive_seed(seed, "kfold", c));
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) fold_of[i % n_splits].push_back(idx[i]);
  }
  std::vector<FoldIndices> folds(n_splits);
  for (std::size_t f = 0; f < n_splits; ++f) {
    auto val = fold_of[f];
    std::sort(val.begin(), val.end());
    std::vector<bool> in_val(ds.samples.size(), false);
    for (std::size_t i : val) in_val[i] = true;
    FoldIndices fi;
    fi.val = std::move(val);
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      if (!in_val[i]) fi.train.push_back(i);
    folds[f] = std::move(fi);
  }
  return folds;
}

// --------------------------------------------------------------------------
// augmentation
// --------------------------------------------------------------------------

KeypointSequence augment(const KeypointSequence& seq, RngStream& rng,
                         const AugmentConfig& cfg) {
  KeypointSequence out = seq;
  if (cfg.max_shift > 0) {
    // temporal crop: positive shift starts later, negative shift ends earlier
    const std::int64_t max_cut = static_cast<std::int64_t>(seq.frames) - 1;
    std::int64_t delta = rng.range(-cfg.max_shift, cfg.max_shift);
    delta = std::clamp<std::int64_t>(delta, -max_cut, max_cut);
    if (delta > 0) {
      out.values.erase(out.values.begin(),
                       out.values.begin() + static_cast<std::ptrdiff_t>(delta * seq.features));
      out.frames -= static_cast<std::uint32_t>(delta);
    } else if (delta < 0) {
      out.frames -= static_cast<std::uint32_t>(-delta);
      out.values.resize(static_cast<std::size_t>(out.frames) * out.features);
    }
  }
  if (cfg.jitter_sigma > 0)
    for (auto& v : out.values) v += static_cast<float>(rng.normal(0.0, cfg.jitter_sigma));
  if (cfg.frame_dropout > 0) {
    std::vector<std::uint32_t> kept;
    kept.reserve(out.frames);
    for (std::uint32_t t = 0; t < out.frames; ++t)
      if (!rng.bernoulli(cfg.frame_dropout)) kept.push_back(t);
    if (kept.empty()) kept.push_back(0);
    if (kept.size() != out.frames) {
      KeypointSequence packed = out;
      packed.frames = static_cast<std::uint32_t>(kept.size());
      packed.values.resize(kept.size() * out.features);
      for (std::size_t i = 0; i < kept.size(); ++i)
        std::copy_n(out.values.begin() + static_cast<std::ptrdiff_t>(kept[i] * out.features),
                    out.features, packed.values.begin() + static_cast<std::ptrdiff_t>(i * out.features));
      out = std::move(packed);
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// synthetic generator
// --------------------------------------------------------------------------

Dataset synth_generate(std::size_t num_classes, std::size_t samples_per_class,
                       std::size_t frames, std::size_t features, std::uint64_t seed,
                       double noise_sigma) {
  if (num_classes < 1 || samples_per_class < 1 || frames < 1 || features < 1)
    throw ConfigError("synth_generate: all counts must be >= 1");
  constexpr std::size_t kAnchors = 4;
  constexpr double kAnchorSpread = 0.35;  // within-class anchor jitter around the class center
  constexpr double kPi = 3.141592653589793238462643;

  Dataset ds;
  ds.class_names.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    char name[24];
    std::snprintf(name, sizeof(name), "class_%03zu", c);
    ds.class_names.emplace_back(name);
  }
  ds.samples.reserve(num_classes * samples_per_class);

  std::vector<double> anchors(kAnchors * features);
  for (std::size_t c = 0; c < num_classes; ++c) {
    RngStream class_rng(derive_seed(seed, "class", c));
    std::vector<double> center(features);
    for (auto& v : center) v = class_rng.normal();
    for (std::size_t a = 0; a < kAnchors; ++a)
      for (std::size_t f = 0; f < features; ++f)
        anchors[a * features + f] = center[f] + kAnchorSpread * class_rng.normal();

    for (std::size_t s = 0; s < samples_per_class; ++s) {
      RngStream rng(derive_seed(seed, "sample", c, s));
      const double phase = rng.uniform();
      KeypointSequence seq;
      seq.frames = static_cast<std::uint32_t>(frames);
      seq.features = static_cast<std::uint32_t>(features);
      seq.label = static_cast<int>(c);
      seq.values.resize(frames * features);
      for (std::size_t t = 0; t < frames; ++t) {
        double pos = (static_cast<double>(t) / static_cast<double>(frames)) + phase;
        pos -= std::floor(pos);  // cyclic trajectory position in [0, 1)
        const double p = pos * static_cast<double>(kAnchors);
        const std::size_t a0 = static_cast<std::size_t>(p) % kAnchors;
        const std::size_t a1 = (a0 + 1) % kAnchors;
        const double w = (1.0 - std::cos(kPi * (p - std::floor(p)))) / 2.0;
        for (std::size_t f = 0; f < features; ++f) {
          const double base =
              (1.0 - w) * anchors[a0 * features + f] + w * anchors[a1 * features + f];
          seq.values[t * features + f] =
              static_cast<float>(base + noise_sigma * rng.normal());
        }
      }
      ds.samples.push_back(std::move(seq));
    }
  }
  return ds;
}

}  // namespace signseq
