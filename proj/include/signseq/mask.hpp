#pragma once

#include <cstdint>
#include <vector>

#include "signseq/common.hpp"

namespace signseq {

// Validity mask for a padded batch of sequences. Valid frames always form a
// prefix; padding only ever sits at the tail.
class SequenceMask {
 public:
  SequenceMask() = default;

  SequenceMask(std::size_t batch, std::size_t max_len, std::vector<std::size_t> valid_lens)
      : batch_(batch), max_len_(max_len), valid_len_(std::move(valid_lens)) {
    if (valid_len_.size() != batch_)
      throw ShapeError("SequenceMask: valid length count " + std::to_string(valid_len_.size()) +
                       " does not match batch " + std::to_string(batch_));
    for (std::size_t b = 0; b < batch_; ++b) {
      if (valid_len_[b] < 1 || valid_len_[b] > max_len_)
        throw ShapeError("SequenceMask: sample " + std::to_string(b) + " has valid length " +
                         std::to_string(valid_len_[b]) + " outside [1, " +
                         std::to_string(max_len_) + "]");
    }
  }

  static SequenceMask all_valid(std::size_t batch, std::size_t max_len) {
    return SequenceMask(batch, max_len, std::vector<std::size_t>(batch, max_len));
  }

  std::size_t batch() const { return batch_; }
  std::size_t max_len() const { return max_len_; }
  std::size_t valid_len(std::size_t b) const { return valid_len_[b]; }
  const std::vector<std::size_t>& valid_lens() const { return valid_len_; }

  bool is_valid(std::size_t b, std::size_t t) const { return t < valid_len_[b]; }

  bool fully_valid() const {
    for (std::size_t l : valid_len_)
      if (l != max_len_) return false;
    return true;
  }

  std::size_t total_valid() const {
    std::size_t n = 0;
    for (std::size_t l : valid_len_) n += l;
    return n;
  }

 private:
  std::size_t batch_ = 0;
  std::size_t max_len_ = 0;
  std::vector<std::size_t> valid_len_;
};

}  // namespace signseq
