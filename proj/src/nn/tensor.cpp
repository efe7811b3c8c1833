#include "promptseg/nn/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace promptseg::nn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
TensorT<T>::TensorT(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
TensorT<T>::TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

template <typename T>
TensorT<T> TensorT<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  return TensorT(std::move(shape), data_);
}

template <typename T>
bool TensorT<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
std::size_t TensorT<T>::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw ShapeError("tensor index rank " + std::to_string(idx.size()) + " != tensor rank " +
                     std::to_string(shape_.size()));
  }
  std::size_t off = 0;
  std::size_t d = 0;
  for (auto i : idx) {
    if (i >= shape_[d]) throw ShapeError("tensor index out of range on axis " + std::to_string(d));
    off = off * shape_[d] + i;
    ++d;
  }
  return off;
}

template class TensorT<float>;
template class TensorT<double>;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw ConfigError("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(engine_());
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double std) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > 2.0);
  return z * std;
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

}  // namespace promptseg::nn
