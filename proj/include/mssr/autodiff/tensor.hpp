#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mssr::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of 64-bit reals with an optional gradient buffer.
//
// Tensor is a handle: copies share storage, which is how the tape refers to
// the inputs and outputs of recorded ops. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> values();
  std::span<const double> values() const;
  double* data() { return values().data(); }
  const double* data() const { return values().data(); }
  double& operator[](std::size_t i) { return values()[i]; }
  double operator[](std::size_t i) const { return values()[i]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  // Gradient buffer, allocated (zero-filled) on first mutable access.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  Tensor clone() const;
  // Same values in a new storage with requires_grad off.
  Tensor detach() const { return clone().set_requires_grad(false); }
  // Shares storage with *this under a different shape of equal size.
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Throws ShapeError naming the op and both shapes.
void expect_same_shape(const char* op, const Tensor& a, const Tensor& b);
void expect_rank(const char* op, const Tensor& t, std::size_t rank);

// Throws NumericError if any value is NaN/Inf. Called after every forward op
// in builds with MSSR_CHECK_FINITE defined.
void check_finite(const char* op, const Tensor& t);

}  // namespace mssr::ad
