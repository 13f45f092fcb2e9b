#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deftan/errors.hpp"

namespace deftan {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major tensor of real scalars. S is float for training and
// double for gradient verification; the same code paths are instantiated
// for both.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(check_dims(shape_), fill) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& operator()(int64_t i) { return data_[static_cast<size_t>(i)]; }
  const S& operator()(int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& operator()(int64_t i, int64_t j) {
    return data_[static_cast<size_t>(i * shape_[1] + j)];
  }
  const S& operator()(int64_t i, int64_t j) const {
    return data_[static_cast<size_t>(i * shape_[1] + j)];
  }

  S& operator()(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const S& operator()(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  S& operator()(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  const S& operator()(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  S max_abs() const {
    S m = S(0);
    for (S v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  template <class D>
  Tensor<D> cast() const {
    Tensor<D> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<D>(data_[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  static size_t check_dims(const Shape& s) {
    for (int64_t d : s)
      if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(s));
    return static_cast<size_t>(shape_numel(s));
  }

  Shape shape_;
  std::vector<S> data_;
};

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                        const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace deftan
