#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "htr/util.hpp"

namespace htr {

// Dense row-major array of doubles, rank 1..4. Carrier of images entering
// the network, activations, gradients.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 4)
      throw ValidationError("tensor rank must be 1..4");
    data_.assign(numel_of(shape_), 0.0);
  }

  Tensor(std::initializer_list<std::size_t> shape)
      : Tensor(std::vector<std::size_t>(shape)) {}

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t(std::move(shape));
    if (data.size() != t.size())
      throw ValidationError("tensor data length does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i) { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double at(std::size_t i) const { return data_[i]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (numel_of(shape) != size())
      throw ValidationError("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  void check_finite(const std::string& where) const {
    if (!all_finite()) throw RuntimeFailure("non-finite values in " + where);
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void axpy(double a, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) throw ValidationError("axpy shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ValidationError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace htr
