#include "mssr/autodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "mssr/error.hpp"

namespace mssr::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
  impl_->value.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<Impl>()) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->value = std::move(values);
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->value.size() : 0; }

std::span<double> Tensor::values() {
  if (!impl_) return {};
  return impl_->value;
}

std::span<const double> Tensor::values() const {
  if (!impl_) return {};
  return impl_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->value[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_) impl_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::grad() {
  if (!impl_) return {};
  if (impl_->grad.size() != impl_->value.size()) impl_->grad.assign(impl_->value.size(), 0.0);
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->value.size() && !impl_->value.empty(); }

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  Tensor t(impl_->shape, impl_->value);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

void expect_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void expect_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

void check_finite(const char* op, const Tensor& t) {
  const auto v = t.values();
  if (std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) return;
  throw NumericError(std::string(op) + ": non-finite value in output of shape " + shape_str(t.shape()));
}

}  // namespace mssr::ad
