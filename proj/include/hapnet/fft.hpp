#pragma once

// Complex FFT kernels of arbitrary length: iterative radix-2 for powers of
// two, a table-driven direct DFT for other lengths up to 24, Bluestein's
// chirp-z reduction beyond. Plans are cached per length and shared between
// threads.

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace hapnet::fft {

using cplx = std::complex<double>;

class Plan {
 public:
  explicit Plan(std::size_t n);

  std::size_t size() const { return n_; }
  /// In-place, unnormalized, X[k] = sum x[j] exp(-2 pi i jk/n).
  void forward(std::span<cplx> data) const;
  /// In-place, unnormalized, sign +1 in the exponent.
  void inverse(std::span<cplx> data) const;

 private:
  void radix2(std::span<cplx> data, bool inverse) const;
  void bluestein(std::span<cplx> data) const;
  void direct(std::span<cplx> data, bool inverse) const;

  std::size_t n_;
  bool pow2_;
  std::vector<std::size_t> bitrev_;
  std::vector<cplx> twiddle_;  // exp(-2 pi i j/n), j < n/2

  std::vector<cplx> roots_;  // exp(-2 pi i j/n), j < n; direct DFT only

  // Bluestein state (non power-of-two n).
  std::size_t m_ = 0;
  std::vector<cplx> chirp_;            // exp(-i pi j^2/n), j < n
  std::vector<cplx> chirp_spectrum_;   // FFT_m of the conjugate chirp, wrapped
  std::vector<std::size_t> m_bitrev_;
  std::vector<cplx> m_twiddle_;
};

const Plan& plan(std::size_t n);

/// Unnormalized forward real 2-D transform of an h x w block into its
/// h x (w/2+1) half spectrum.
void rfft2(std::span<const double> x, std::size_t h, std::size_t w, std::span<cplx> out);

/// Inverse of rfft2 (1/(h*w) normalized). Imaginary parts of self-conjugate
/// bins are ignored, so the result is real for any half spectrum.
void irfft2(std::span<const cplx> spectrum, std::size_t h, std::size_t w, std::span<double> out);

/// Unnormalized in-place full complex 2-D transform of an h x w block.
void fft2(std::span<cplx> data, std::size_t h, std::size_t w, bool inverse);

inline std::size_t half_width(std::size_t w) { return w / 2 + 1; }

}  // namespace hapnet::fft
