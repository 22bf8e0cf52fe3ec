#pragma once

// Dataset model for keypoint sequences: ingestion (.ksq + manifest),
// normalization, padding/masking, stratified splits, augmentation, and the
// seeded synthetic gesture generator standing in for recorded sign videos.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "signseq/mask.hpp"
#include "signseq/random.hpp"
#include "signseq/tensor.hpp"

namespace signseq {

struct KeypointSequence {
  std::uint32_t frames = 0;
  std::uint32_t features = 0;
  std::vector<float> values;  // frames x features, frame-major
  int label = 0;

  float at(std::size_t t, std::size_t f) const { return values[t * features + f]; }
  float& at(std::size_t t, std::size_t f) { return values[t * features + f]; }
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<KeypointSequence> samples;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t features_per_frame() const { return samples.empty() ? 0 : samples[0].features; }
  void validate() const;
};

// --------------------------------------------------------------------------
// normalization (statistics always come from the training split)
// --------------------------------------------------------------------------

enum class NormScheme { none, zscore };

struct NormStats {
  std::vector<float> mean;
  std::vector<float> stdev;
};

NormStats compute_norm_stats(const Dataset& ds);
KeypointSequence normalize(const KeypointSequence& seq, NormScheme scheme,
                           const NormStats& stats);
void normalize_in_place(Dataset& ds, NormScheme scheme, const NormStats& stats);

// --------------------------------------------------------------------------
// batching
// --------------------------------------------------------------------------

template <typename T>
struct PaddedBatch {
  Tensor<T> values;  // [batch, max_len, features], zeros at padded frames
  SequenceMask mask;
  std::vector<int> labels;
};

// Tail-pads with zeros; sequences longer than max_len keep their first
// max_len frames (gesture onset carries the class signal).
template <typename T>
PaddedBatch<T> pad_and_mask(const std::vector<const KeypointSequence*>& samples,
                            std::size_t max_len) {
  if (samples.empty()) throw DataError("pad_and_mask: empty sample list");
  if (max_len < 1) throw ConfigError("pad_and_mask: max_len must be >= 1");
  const std::size_t B = samples.size();
  const std::size_t F = samples[0]->features;
  PaddedBatch<T> batch{Tensor<T>({B, max_len, F}), SequenceMask(), {}};
  std::vector<std::size_t> lens(B);
  batch.labels.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const KeypointSequence& s = *samples[b];
    if (s.features != F)
      throw DataError("pad_and_mask: inconsistent feature counts " + std::to_string(s.features) +
                      " vs " + std::to_string(F));
    const std::size_t keep = std::min<std::size_t>(s.frames, max_len);
    lens[b] = keep;
    batch.labels[b] = s.label;
    T* dst = batch.values.data().data() + b * max_len * F;
    for (std::size_t i = 0; i < keep * F; ++i) dst[i] = static_cast<T>(s.values[i]);
  }
  batch.mask = SequenceMask(B, max_len, std::move(lens));
  return batch;
}

template <typename T>
PaddedBatch<T> pad_and_mask(const Dataset& ds, const std::vector<std::size_t>& indices,
                            std::size_t max_len) {
  std::vector<const KeypointSequence*> ptrs;
  ptrs.reserve(indices.size());
  for (std::size_t i : indices) ptrs.push_back(&ds.samples[i]);
  return pad_and_mask<T>(ptrs, max_len);
}

// --------------------------------------------------------------------------
// persistence: .ksq sequence files + CSV manifest + class table
// --------------------------------------------------------------------------

void save_ksq(const std::string& path, const KeypointSequence& seq);
KeypointSequence load_ksq(const std::string& path);  // label left at 0

// Writes one .ksq per sample plus manifest.csv and classes.txt into dir;
// returns the manifest path.
std::string save_dataset(const Dataset& ds, const std::string& dir);

// Loads via manifest; class table is classes.txt next to the manifest, and
// sequence paths are resolved relative to the manifest's directory.
Dataset load_dataset(const std::string& manifest_path);

// --------------------------------------------------------------------------
// splits
// --------------------------------------------------------------------------

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction,
                                            std::uint64_t seed);

struct FoldIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

std::vector<FoldIndices> kfold_split(const Dataset& ds, std::size_t n_splits,
                                     std::uint64_t seed = 42);

// --------------------------------------------------------------------------
// augmentation
// --------------------------------------------------------------------------

struct AugmentConfig {
  int max_shift = 0;          // temporal crop of up to +/- max_shift frames
  double jitter_sigma = 0.0;  // gaussian feature noise
  double frame_dropout = 0.0; // per-frame drop probability (>= 1 frame kept)

  bool enabled() const { return max_shift > 0 || jitter_sigma > 0 || frame_dropout > 0; }
};

KeypointSequence augment(const KeypointSequence& seq, RngStream& rng, const AugmentConfig& cfg);

// --------------------------------------------------------------------------
// synthetic gesture generator
// --------------------------------------------------------------------------

// Per class, a seeded set of anchor poses interpolated cyclically over time
// forms a class-distinct trajectory; each sample gets a random temporal phase
// plus gaussian noise. Bit-reproducible for a given (seed, shape).
Dataset synth_generate(std::size_t num_classes, std::size_t samples_per_class,
                       std::size_t frames, std::size_t features, std::uint64_t seed,
                       double noise_sigma);

}  // namespace signseq
