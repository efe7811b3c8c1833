#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "promptseg/error.hpp"

namespace promptseg::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major n-dimensional array with value semantics. `float` is the
// production scalar, `double` exists for gradient verification.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;
  explicit TensorT(Shape shape, T fill = T(0));
  TensorT(Shape shape, std::vector<T> data);

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT full(Shape shape, T v) { return TensorT(std::move(shape), v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  // Same data, new shape with equal element count.
  TensorT reshaped(Shape shape) const;

  bool all_finite() const;

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return TensorT<U>(shape_, std::move(out));
  }

  friend bool operator==(const TensorT& a, const TensorT& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

extern template class TensorT<float>;
extern template class TensorT<double>;

// Deterministic generator: std::mt19937_64 (bit-exact by the C++ standard)
// with distribution transforms implemented here rather than by the standard
// library, whose distributions are implementation-defined.
//   uniform():  top 53 bits of one draw scaled to [0, 1)
//   normal():   Box-Muller on two uniforms, cosine branch only
//   truncated_normal(std): normal()*std resampled until |z| <= 2
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  double truncated_normal(double std);

  // Independent stream derived from this generator's seed and a label.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer, used to derive sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace promptseg::nn
