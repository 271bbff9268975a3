#include "compdis/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace compdis {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("Tensor::from: shape/value count mismatch");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = lo + (hi - lo) * rng.uniform();
  return t;
}

namespace {
size_t flat_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
  if (idx.size() != shape.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
  size_t flat = 0;
  size_t i = 0;
  for (int v : idx) {
    if (v < 0 || v >= shape[i]) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * static_cast<size_t>(shape[i]) + static_cast<size_t>(v);
    ++i;
  }
  return flat;
}
}  // namespace

double& Tensor::at(std::initializer_list<int> idx) { return data_[flat_index(shape_, idx)]; }

double Tensor::at(std::initializer_list<int> idx) const { return data_[flat_index(shape_, idx)]; }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

void Tensor::add_(const Tensor& o) {
  if (!same_shape(o)) throw std::invalid_argument("add_: shape mismatch");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

void Tensor::axpy_(double a, const Tensor& o) {
  if (!same_shape(o)) throw std::invalid_argument("axpy_: shape mismatch");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
}

void Tensor::scale_(double a) {
  for (auto& x : data_) x *= a;
}

double Tensor::sum() const {
  double s = 0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace compdis
