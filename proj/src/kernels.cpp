#include "impromptu/kernels.hpp"

#include <algorithm>
#include <cmath>

#include <omp.h>

namespace impromptu::kernels {

namespace {

int g_threads = 0;

template <class Real>
inline void gemm_row(std::size_t i, std::size_t n, std::size_t k, const Real* a, const Real* b,
                     Real* c, bool accumulate) {
  Real* ci = c + i * n;
  if (!accumulate) std::fill(ci, ci + n, Real(0));
  const Real* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const Real s = ai[p];
    const Real* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
  }
}

template <class Real>
inline void gemm_bt_row(std::size_t i, std::size_t n, std::size_t k, const Real* a, const Real* b,
                        Real* c, bool accumulate) {
  Real* ci = c + i * n;
  const Real* ai = a + i * k;
  for (std::size_t j = 0; j < n; ++j) {
    const Real v = dot(ai, b + j * k, k);
    ci[j] = accumulate ? ci[j] + v : v;
  }
}

template <class Real>
inline void gemm_at_row(std::size_t i, std::size_t m, std::size_t n, std::size_t k,
                        const Real* a, const Real* b, Real* c, bool accumulate) {
  Real* ci = c + i * n;
  if (!accumulate) std::fill(ci, ci + n, Real(0));
  for (std::size_t p = 0; p < k; ++p) {
    const Real s = a[p * m + i];
    if (s == Real(0)) continue;
    const Real* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
  }
}

template <class Real>
inline void softmax_row(std::size_t n, Real* x) {
  Real mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  Real sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  const Real inv = Real(1) / sum;
  for (std::size_t j = 0; j < n; ++j) x[j] *= inv;
}

inline double cosine_row(std::span<const float> query, double query_norm, const float* row,
                         double row_norm, std::size_t dim) {
  if (row_norm == 0.0 || query_norm == 0.0) return -2.0;
  double d = 0.0;
  for (std::size_t j = 0; j < dim; ++j) d += static_cast<double>(query[j]) * row[j];
  return d / (query_norm * row_norm);
}

}  // namespace

template <class Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
  Real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  }
  for (std::size_t l = 0; j < n; ++j, ++l) acc[l] += a[j] * b[j];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

void set_threads(int n) {
  g_threads = n;
  if (n > 0) omp_set_num_threads(n);
}

int threads() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

namespace serial {

template <class Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_bt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_bt_row(i, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_at(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_at_row(i, m, n, k, a, b, c, accumulate);
}

template <class Real>
void softmax_rows(std::size_t m, std::size_t n, Real* x) {
  for (std::size_t i = 0; i < m; ++i) softmax_row(n, x + i * n);
}

void cosine_scan(std::span<const float> query, double query_norm, const float* rows,
                 std::span<const double> norms, std::size_t dim, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = cosine_row(query, query_norm, rows + i * dim, norms[i], dim);
  }
}

}  // namespace serial

namespace parallel {

template <class Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_row(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_bt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_bt_row(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_at(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    gemm_at_row(static_cast<std::size_t>(i), m, n, k, a, b, c, accumulate);
  }
}

template <class Real>
void softmax_rows(std::size_t m, std::size_t n, Real* x) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) softmax_row(n, x + static_cast<std::size_t>(i) * n);
}

void cosine_scan(std::span<const float> query, double query_norm, const float* rows,
                 std::span<const double> norms, std::size_t dim, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(i);
    out[r] = cosine_row(query, query_norm, rows + r * dim, norms[r], dim);
  }
}

}  // namespace parallel

#define IMPROMPTU_INSTANTIATE(Real)                                                            \
  template Real dot<Real>(const Real*, const Real*, std::size_t);                              \
  template void serial::gemm<Real>(std::size_t, std::size_t, std::size_t, const Real*,          \
                                   const Real*, Real*, bool);                                  \
  template void serial::gemm_bt<Real>(std::size_t, std::size_t, std::size_t, const Real*,       \
                                      const Real*, Real*, bool);                               \
  template void serial::gemm_at<Real>(std::size_t, std::size_t, std::size_t, const Real*,       \
                                      const Real*, Real*, bool);                               \
  template void serial::softmax_rows<Real>(std::size_t, std::size_t, Real*);                    \
  template void parallel::gemm<Real>(std::size_t, std::size_t, std::size_t, const Real*,        \
                                     const Real*, Real*, bool);                                \
  template void parallel::gemm_bt<Real>(std::size_t, std::size_t, std::size_t, const Real*,     \
                                        const Real*, Real*, bool);                             \
  template void parallel::gemm_at<Real>(std::size_t, std::size_t, std::size_t, const Real*,     \
                                        const Real*, Real*, bool);                             \
  template void parallel::softmax_rows<Real>(std::size_t, std::size_t, Real*);

IMPROMPTU_INSTANTIATE(float)
IMPROMPTU_INSTANTIATE(double)

#undef IMPROMPTU_INSTANTIATE

}  // namespace impromptu::kernels
