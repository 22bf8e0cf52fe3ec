#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace signseq {

using Shape = std::vector<std::size_t>;

// 64-byte aligned allocator for all numeric buffers. Keeping every buffer at
// the same alignment phase makes vectorized kernels take identical code paths
// regardless of allocator history, which bit-for-bit reproducibility depends
// on (two training runs must produce identical checkpoints).
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAlloc() noexcept = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t{alignment});
  }
  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using NumVec = std::vector<T, AlignedAlloc<T>>;

// Error hierarchy: everything the engine throws derives from signseq::Error,
// split by what went wrong so callers and tests can discriminate.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

template <typename Vec>
bool all_finite(const Vec& v) {
  for (auto x : v) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

}  // namespace signseq
