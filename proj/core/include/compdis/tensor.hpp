#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "compdis/rng.hpp"

namespace compdis {

// Dense row-major tensor of doubles. Value semantics; shapes are small int
// vectors ({N,C,H,W}, {K,D}, {N}, ...).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // Slow general indexer, mainly for tests and non-hot paths.
  double& at(std::initializer_list<int> idx);
  double at(std::initializer_list<int> idx) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

  Tensor reshaped(std::vector<int> shape) const;

  void fill(double v);
  void add_(const Tensor& o);             // this += o
  void axpy_(double a, const Tensor& o);  // this += a * o
  void scale_(double a);

  double sum() const;
  double max_abs() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

size_t shape_numel(const std::vector<int>& shape);

}  // namespace compdis
