#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mssr/autodiff/tensor.hpp"

namespace mssr::ad {

struct GradCheck {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed() const { return max_rel_error < threshold; }
};

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) with floor = 1e-3 * max|n|.
// The floor keeps entries whose true derivative is (nearly) zero from
// turning finite-difference round-off into an unbounded ratio.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Central differences of `loss` w.r.t. every entry of every input, compared
// against the adjoints recorded on a fresh tape. `loss` must build a scalar
// from the inputs and be repeatable (same value for the same inputs).
GradCheck check_gradients(std::string name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          double step, double threshold);

// Analytic gradients (via the tape) and central differences, returned side by
// side for callers that apply their own metric.
struct GradPair {
  std::vector<double> analytic;
  std::vector<double> numeric;
};
GradPair gradient_pair(const std::function<Tensor()>& loss, Tensor input, double step);

// Finite-difference checks for every differentiable primitive on small random
// tensors at 64-bit precision.
std::vector<GradCheck> primitive_gradchecks(std::uint64_t seed, double threshold = 1e-5);

}  // namespace mssr::ad
