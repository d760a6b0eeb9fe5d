#pragma once

// Dense row-major kernels shared by the embedding, transformer and scoring
// code. Every kernel has a serial reference and an OpenMP version; the
// parallel versions split work by output row only, so each output element
// is produced by the same instruction sequence and results match the serial
// reference bit for bit.

#include <cstddef>
#include <exception>
#include <mutex>
#include <span>

namespace impromptu::kernels {

/// Dot product with eight independent partial sums.
template <class Real>
Real dot(const Real* a, const Real* b, std::size_t n);

namespace serial {

/// C[m,n] (+)= A[m,k] * B[k,n]
template <class Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate);

/// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class Real>
void gemm_bt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate);

/// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class Real>
void gemm_at(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate);

/// Numerically stable softmax of each row of X[m,n], in place.
template <class Real>
void softmax_rows(std::size_t m, std::size_t n, Real* x);

/// out[i] = cos(query, rows[i]); rows with zero norm get -2 (never selected).
void cosine_scan(std::span<const float> query, double query_norm, const float* rows,
                 std::span<const double> norms, std::size_t dim, std::span<double> out);

}  // namespace serial

namespace parallel {

template <class Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate);

template <class Real>
void gemm_bt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate);

template <class Real>
void gemm_at(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate);

template <class Real>
void softmax_rows(std::size_t m, std::size_t n, Real* x);

void cosine_scan(std::span<const float> query, double query_norm, const float* rows,
                 std::span<const double> norms, std::size_t dim, std::span<double> out);

}  // namespace parallel

/// Runs f(i) for i in [0, n) on the OpenMP team. The first exception thrown
/// by any iteration is rethrown after the loop.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  std::exception_ptr error;
  std::mutex m;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(m);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

/// Worker cap used by every OpenMP region in the library (0 = runtime default).
void set_threads(int n);
int threads();

}  // namespace impromptu::kernels
