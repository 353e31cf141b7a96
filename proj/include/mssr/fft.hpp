#pragma once

// Thin RAII layer over FFTW's real-input transforms. Plans are created once per
// size (FFTW_ESTIMATE, so planning is deterministic) and shared; buffers are
// per-call so execution is safe from several threads.

#include <complex>
#include <cstddef>
#include <memory>
#include <span>

namespace mssr::fft {

// Smallest n' >= n of the form 2^a 3^b 5^c.
std::size_t good_size(std::size_t n);

template <typename T>
struct FftwDeleter {
  void operator()(T* p) const noexcept;
};

template <typename T>
using Buffer = std::unique_ptr<T[], FftwDeleter<T>>;

Buffer<double> alloc_real(std::size_t n);
Buffer<std::complex<double>> alloc_complex(std::size_t n);

// Forward real-to-complex transform of length n: in has n entries, out n/2+1.
void forward(std::size_t n, double* in, std::complex<double>* out);
// Unnormalized inverse: out = n * x for out = inverse(forward(x)).
// `in` is clobbered.
void inverse(std::size_t n, std::complex<double>* in, double* out);

}  // namespace mssr::fft
