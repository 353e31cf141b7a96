#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "mssr/autodiff/tape.hpp"
#include "mssr/autodiff/tensor.hpp"

namespace mssr::ad::detail {

inline void finished([[maybe_unused]] const char* op, [[maybe_unused]] const Tensor& out) {
#ifdef MSSR_CHECK_FINITE
  check_finite(op, out);
#endif
}

template <typename Adjoint>
void record(const char* op, Tensor& out, Adjoint&& adjoint) {
  out.set_requires_grad(true);
  active_tape()->record(op, out, std::forward<Adjoint>(adjoint));
}

// Row-major GEMM kernels with a fixed summation order over the inner index,
// so every output entry is reproducible regardless of batch size or thread
// count.
// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
// C[M,N] (+)= A^T * B with A stored [K,M], B stored [K,N]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
// out[cols, rows] = in[rows, cols]^T
void transpose(std::size_t rows, std::size_t cols, const double* in, double* out);

}  // namespace mssr::ad::detail
