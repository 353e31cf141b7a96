#include "mssr/fft.hpp"

#include <fftw3.h>

#include <cstdint>
#include <map>
#include <mutex>

namespace mssr::fft {
namespace {

struct Plans {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

std::mutex g_mutex;

const Plans& plans_for(std::size_t n) {
  static std::map<std::size_t, Plans> cache;
  std::lock_guard lock(g_mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  // Planning arrays come from fftw_malloc, the same allocator used for every
  // execution buffer, so the SIMD alignment assumptions of the plan hold.
  auto real = alloc_real(n);
  auto spec = alloc_complex(n / 2 + 1);
  auto* c = reinterpret_cast<fftw_complex*>(spec.get());
  Plans p;
  p.forward = fftw_plan_dft_r2c_1d(static_cast<int>(n), real.get(), c, FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n), c, real.get(), FFTW_ESTIMATE);
  return cache.emplace(n, p).first->second;
}

}  // namespace

std::size_t good_size(std::size_t n) {
  if (n <= 1) return 1;
  std::size_t best = SIZE_MAX;
  for (std::size_t p2 = 1; p2 < 2 * n; p2 *= 2) {
    for (std::size_t p3 = p2; p3 < 2 * n; p3 *= 3) {
      for (std::size_t p5 = p3; p5 < 2 * n; p5 *= 5) {
        if (p5 >= n && p5 < best) best = p5;
      }
    }
  }
  return best;
}

template <typename T>
void FftwDeleter<T>::operator()(T* p) const noexcept {
  fftw_free(p);
}

template struct FftwDeleter<double>;
template struct FftwDeleter<std::complex<double>>;

Buffer<double> alloc_real(std::size_t n) {
  return Buffer<double>(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
}

Buffer<std::complex<double>> alloc_complex(std::size_t n) {
  return Buffer<std::complex<double>>(
      static_cast<std::complex<double>*>(fftw_malloc(sizeof(std::complex<double>) * n)));
}

void forward(std::size_t n, double* in, std::complex<double>* out) {
  fftw_execute_dft_r2c(plans_for(n).forward, in, reinterpret_cast<fftw_complex*>(out));
}

void inverse(std::size_t n, std::complex<double>* in, double* out) {
  fftw_execute_dft_c2r(plans_for(n).inverse, reinterpret_cast<fftw_complex*>(in), out);
}

}  // namespace mssr::fft
