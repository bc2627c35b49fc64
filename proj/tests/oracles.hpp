#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Deliberately naive: plain loops, long double where it matters.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <utility>
#include <vector>

#include "hapnet/random.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix matrix(std::size_t rows, std::size_t cols, const std::vector<double>& flat) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = flat[i * cols + j];
  }
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < b.size(); ++k) acc += static_cast<long double>(a[i][k]) * b[k][j];
      c[i][j] = static_cast<double>(acc);
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  }
  return t;
}

inline std::vector<double> softmax(const std::vector<double>& row) {
  long double total = 0.0L;
  std::vector<long double> e(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(row[i]));
    total += e[i];
  }
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / total);
  return out;
}

/// Full 2-D DFT of a real h x w block, X[k1][k2] = sum x exp(-2 pi i (k1 r/h + k2 c/w)).
inline std::vector<std::complex<double>> dft2(const std::vector<double>& x, std::size_t h, std::size_t w,
                                              int sign = -1) {
  std::vector<std::complex<double>> out(h * w);
  for (std::size_t k1 = 0; k1 < h; ++k1) {
    for (std::size_t k2 = 0; k2 < w; ++k2) {
      long double re = 0.0L, im = 0.0L;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const long double phase = sign * 2.0L * std::numbers::pi_v<long double> *
                                    (static_cast<long double>((k1 * r) % h) / h + static_cast<long double>((k2 * c) % w) / w);
          re += x[r * w + c] * std::cos(phase);
          im += x[r * w + c] * std::sin(phase);
        }
      }
      out[k1 * w + k2] = {static_cast<double>(re), static_cast<double>(im)};
    }
  }
  return out;
}

/// Circular 2-D convolution y[r][c] = sum_{u,v} x[u][v] k[(r-u) mod h][(c-v) mod w].
inline std::vector<double> circular_conv(const std::vector<double>& x, const std::vector<double>& k, std::size_t h,
                                         std::size_t w) {
  std::vector<double> y(h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      long double acc = 0.0L;
      for (std::size_t u = 0; u < h; ++u) {
        for (std::size_t v = 0; v < w; ++v) acc += x[u * w + v] * k[((r + h - u) % h) * w + (c + w - v) % w];
      }
      y[r * w + c] = static_cast<double>(acc);
    }
  }
  return y;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvalues
/// descending, eigenvectors as columns.
inline std::pair<std::vector<double>, Matrix> jacobi_eigen(Matrix a) {
  const std::size_t n = a.size();
  Matrix v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  std::vector<double> values(n);
  Matrix vectors(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    values[j] = a[idx[j]][idx[j]];
    for (std::size_t i = 0; i < n; ++i) vectors[i][j] = v[i][idx[j]];
  }
  return {values, vectors};
}

/// Population covariance of samples (rows) x variables (columns).
inline Matrix covariance(const Matrix& samples) {
  const std::size_t n = samples.size(), d = samples[0].size();
  std::vector<long double> mean(d, 0.0L);
  for (const auto& s : samples) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += s[j];
  }
  for (auto& m : mean) m /= n;
  Matrix cov(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      long double acc = 0.0L;
      for (const auto& s : samples) acc += (s[i] - mean[i]) * (s[j] - mean[j]);
      cov[i][j] = static_cast<double>(acc / n);
    }
  }
  return cov;
}

/// Anchored attention materialized densely for one sequence [T x in].
/// Weights are [out x in] like the library's Linear.
struct AttentionWeights {
  Matrix wq, wk, wv, wo;
  std::vector<double> bq, bk, bv, bo;
};

inline Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix y = matmul(x, transpose(w));
  for (auto& row : y) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
  return y;
}

struct AttentionTrace {
  std::vector<Matrix> m_d, m_e, value;  // per head
  Matrix output;
};

inline AttentionTrace anchored_attention(const Matrix& x, const AttentionWeights& w, std::size_t heads, std::size_t s) {
  const Matrix q = affine(x, w.wq, w.bq), k = affine(x, w.wk, w.bk), v = affine(x, w.wv, w.bv);
  const std::size_t tokens = x.size(), width = q[0].size(), d = width / heads;
  const std::size_t anchors = (tokens + s - 1) / s;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionTrace trace;
  Matrix merged(tokens, std::vector<double>(width, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    auto slice = [&](const Matrix& m) {
      Matrix out(tokens, std::vector<double>(d));
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < d; ++j) out[t][j] = m[t][h * d + j];
      }
      return out;
    };
    const Matrix qh = slice(q), kh = slice(k), vh = slice(v);
    Matrix a(anchors, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < anchors; ++i) {
      const std::size_t begin = i * s, end = std::min(tokens, begin + s);
      for (std::size_t t = begin; t < end; ++t) {
        for (std::size_t j = 0; j < d; ++j) a[i][j] += qh[t][j] / static_cast<double>(end - begin);
      }
    }
    Matrix md = matmul(a, transpose(kh)), me = matmul(qh, transpose(a));
    for (auto& row : md) {
      for (auto& val : row) val *= scale;
      row = softmax(row);
    }
    for (auto& row : me) {
      for (auto& val : row) val *= scale;
      row = softmax(row);
    }
    const Matrix y = matmul(me, matmul(md, vh));
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t j = 0; j < d; ++j) merged[t][h * d + j] = y[t][j];
    }
    trace.m_d.push_back(md);
    trace.m_e.push_back(me);
    trace.value.push_back(vh);
  }
  trace.output = affine(merged, w.wo, w.bo);
  return trace;
}

inline std::vector<double> normals(hapnet::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
