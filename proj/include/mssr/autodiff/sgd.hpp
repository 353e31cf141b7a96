#pragma once

#include <cstddef>
#include <vector>

#include "mssr/autodiff/tensor.hpp"

namespace mssr::ad {

// SGD with heavy-ball momentum: v <- momentum * v + grad; p <- p - lr * v.
// Gradients are zeroed after each step.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum);

  void step(double lr);
  void zero_grad();

  // Parameter i moves with lr * scale; defaults to 1.
  void set_lr_scale(std::size_t i, double scale) { scales_.at(i) = scale; }
  const std::vector<double>& lr_scales() const { return scales_; }

  double momentum() const { return momentum_; }
  const std::vector<Tensor>& params() const { return params_; }
  // One buffer per parameter, same length as the parameter.
  std::vector<std::vector<double>>& velocity() { return velocity_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  std::vector<double> scales_;
  double momentum_;
};

// Free-function form of a single update on explicit velocity buffers.
// An empty scales vector means 1 for every parameter.
void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr, double momentum,
              const std::vector<double>& scales = {});

}  // namespace mssr::ad
