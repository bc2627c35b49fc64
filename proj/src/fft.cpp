#include "hapnet/fft.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

namespace hapnet::fft {

namespace {

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

constexpr std::size_t kDirectMax = 24;

std::vector<std::size_t> bit_reversal(std::size_t n) {
  std::vector<std::size_t> rev(n, 0);
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) {
      if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
    }
    rev[i] = r;
  }
  return rev;
}

std::vector<cplx> twiddles(std::size_t n) {
  std::vector<cplx> w(n / 2);
  for (std::size_t j = 0; j < n / 2; ++j) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    w[j] = {std::cos(angle), std::sin(angle)};
  }
  return w;
}

// Decimation-in-time butterflies over a bit-reversed buffer.
void radix2_core(std::span<cplx> a, const std::vector<std::size_t>& rev, const std::vector<cplx>& w, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i < rev[i]) std::swap(a[i], a[rev[i]]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t j = 0; j < half; ++j) {
        cplx tw = w[j * step];
        if (inverse) tw = std::conj(tw);
        const cplx u = a[start + j];
        const cplx v = a[start + j + half] * tw;
        a[start + j] = u + v;
        a[start + j + half] = u - v;
      }
    }
  }
}

}  // namespace

Plan::Plan(std::size_t n) : n_(n), pow2_(is_pow2(n)) {
  if (pow2_) {
    bitrev_ = bit_reversal(n);
    twiddle_ = twiddles(n);
    return;
  }
  if (n <= kDirectMax) {
    roots_.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
      roots_[j] = {std::cos(angle), std::sin(angle)};
    }
    return;
  }
  m_ = 1;
  while (m_ < 2 * n - 1) m_ <<= 1;
  m_bitrev_ = bit_reversal(m_);
  m_twiddle_ = twiddles(m_);
  chirp_.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the angle argument small and exact.
    const std::size_t sq = (j * j) % (2 * n);
    const double angle = -std::numbers::pi * static_cast<double>(sq) / static_cast<double>(n);
    chirp_[j] = {std::cos(angle), std::sin(angle)};
  }
  chirp_spectrum_.assign(m_, cplx{});
  chirp_spectrum_[0] = std::conj(chirp_[0]);
  for (std::size_t j = 1; j < n; ++j) {
    chirp_spectrum_[j] = std::conj(chirp_[j]);
    chirp_spectrum_[m_ - j] = std::conj(chirp_[j]);
  }
  radix2_core(chirp_spectrum_, m_bitrev_, m_twiddle_, false);
}

void Plan::radix2(std::span<cplx> data, bool inverse) const { radix2_core(data, bitrev_, twiddle_, inverse); }

void Plan::bluestein(std::span<cplx> data) const {
  thread_local std::vector<cplx> work;
  work.assign(m_, cplx{});
  for (std::size_t j = 0; j < n_; ++j) work[j] = data[j] * chirp_[j];
  radix2_core(work, m_bitrev_, m_twiddle_, false);
  for (std::size_t j = 0; j < m_; ++j) work[j] *= chirp_spectrum_[j];
  radix2_core(work, m_bitrev_, m_twiddle_, true);
  const double inv_m = 1.0 / static_cast<double>(m_);
  for (std::size_t k = 0; k < n_; ++k) data[k] = work[k] * inv_m * chirp_[k];
}

void Plan::direct(std::span<cplx> data, bool inverse) const {
  cplx in[kDirectMax];
  std::copy(data.begin(), data.end(), in);
  for (std::size_t k = 0; k < n_; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;
    for (std::size_t j = 0; j < n_; ++j) {
      const double wr = roots_[idx].real();
      const double wi = inverse ? -roots_[idx].imag() : roots_[idx].imag();
      re += in[j].real() * wr - in[j].imag() * wi;
      im += in[j].real() * wi + in[j].imag() * wr;
      idx += k;
      if (idx >= n_) idx -= n_;
    }
    data[k] = {re, im};
  }
}

void Plan::forward(std::span<cplx> data) const {
  if (n_ == 1) return;
  if (pow2_) {
    radix2(data, false);
  } else if (!roots_.empty()) {
    direct(data, false);
  } else {
    bluestein(data);
  }
}

void Plan::inverse(std::span<cplx> data) const {
  if (n_ == 1) return;
  if (pow2_) {
    radix2(data, true);
    return;
  }
  if (!roots_.empty()) {
    direct(data, true);
    return;
  }
  for (auto& v : data) v = std::conj(v);
  bluestein(data);
  for (auto& v : data) v = std::conj(v);
}

const Plan& plan(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<Plan>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan>(n);
  return *slot;
}

void fft2(std::span<cplx> data, std::size_t h, std::size_t w, bool inverse) {
  const Plan& row_plan = plan(w);
  const Plan& col_plan = plan(h);
  for (std::size_t r = 0; r < h; ++r) {
    auto row = data.subspan(r * w, w);
    inverse ? row_plan.inverse(row) : row_plan.forward(row);
  }
  std::vector<cplx> col(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = data[r * w + c];
    inverse ? col_plan.inverse(col) : col_plan.forward(col);
    for (std::size_t r = 0; r < h; ++r) data[r * w + c] = col[r];
  }
}

void rfft2(std::span<const double> x, std::size_t h, std::size_t w, std::span<cplx> out) {
  const std::size_t wh = half_width(w);
  const Plan& row_plan = plan(w);
  const Plan& col_plan = plan(h);
  std::vector<cplx> row(w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) row[c] = x[r * w + c];
    row_plan.forward(row);
    for (std::size_t c = 0; c < wh; ++c) out[r * wh + c] = row[c];
  }
  std::vector<cplx> col(h);
  for (std::size_t c = 0; c < wh; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = out[r * wh + c];
    col_plan.forward(col);
    for (std::size_t r = 0; r < h; ++r) out[r * wh + c] = col[r];
  }
}

void irfft2(std::span<const cplx> spectrum, std::size_t h, std::size_t w, std::span<double> out) {
  const std::size_t wh = half_width(w);
  const Plan& row_plan = plan(w);
  const Plan& col_plan = plan(h);
  std::vector<cplx> half(h * wh);
  std::vector<cplx> col(h);
  for (std::size_t c = 0; c < wh; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = spectrum[r * wh + c];
    col_plan.inverse(col);
    for (std::size_t r = 0; r < h; ++r) half[r * wh + c] = col[r];
  }
  // Each row is now the half spectrum of a real signal along w.
  std::vector<cplx> row(w);
  const double norm = 1.0 / static_cast<double>(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < wh; ++c) row[c] = half[r * wh + c];
    for (std::size_t c = wh; c < w; ++c) row[c] = std::conj(half[r * wh + (w - c)]);
    row_plan.inverse(row);
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = row[c].real() * norm;
  }
}

}  // namespace hapnet::fft
