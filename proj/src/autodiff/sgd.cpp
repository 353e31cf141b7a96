#include "mssr/autodiff/sgd.hpp"

#include "mssr/error.hpp"

namespace mssr::ad {

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double base_lr, double momentum,
              const std::vector<double>& scales) {
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = params[p];
    const double lr = scales.empty() ? base_lr : base_lr * scales.at(p);
    auto& v = velocity[p];
    if (v.size() != param.numel()) v.assign(param.numel(), 0.0);
    if (!param.has_grad()) {
      // No gradient this step: the velocity still decays and moves the parameter.
      bool moving = false;
      for (double& x : v) {
        x *= momentum;
        moving = moving || x != 0.0;
      }
      if (!moving) continue;
      auto values = param.values();
      for (std::size_t i = 0; i < v.size(); ++i) values[i] -= lr * v[i];
      continue;
    }
    auto values = param.values();
    auto g = param.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      values[i] -= lr * v[i];
    }
    param.zero_grad();
  }
}

Sgd::Sgd(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), velocity_(params_.size()), scales_(params_.size(), 1.0), momentum_(momentum) {
  for (std::size_t i = 0; i < params_.size(); ++i) velocity_[i].assign(params_[i].numel(), 0.0);
}

void Sgd::step(double lr) { sgd_step(params_, velocity_, lr, momentum_, scales_); }

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace mssr::ad
