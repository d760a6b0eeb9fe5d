#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "impromptu/common.hpp"
#include "impromptu/kernels.hpp"

namespace k = impromptu::kernels;

namespace {

std::vector<float> random_floats(std::size_t n, std::uint64_t seed) {
  impromptu::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_floats(n * n, 1), b = random_floats(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    } else {
      k::serial::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_GemmBt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_floats(n * n, 3), b = random_floats(n * n, 4);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::gemm_bt(n, n, n, a.data(), b.data(), c.data(), false);
    } else {
      k::serial::gemm_bt(n, n, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 512;
  const auto src = random_floats(rows * cols, 5);
  auto x = src;
  for (auto _ : state) {
    x = src;
    if constexpr (Parallel) {
      k::parallel::softmax_rows(rows, cols, x.data());
    } else {
      k::serial::softmax_rows(rows, cols, x.data());
    }
    benchmark::DoNotOptimize(x.data());
  }
}

template <bool Parallel>
void BM_CosineScan(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 100;
  const auto rows = random_floats(n * dim, 6), query = random_floats(dim, 7);
  std::vector<double> norms(n), out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < dim; ++j) s += static_cast<double>(rows[i * dim + j]) * rows[i * dim + j];
    norms[i] = std::sqrt(s);
  }
  double qn = 0;
  for (auto v : query) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::cosine_scan(query, qn, rows.data(), norms, dim, out);
    } else {
      k::serial::cosine_scan(query, qn, rows.data(), norms, dim, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmBt<false>)->Name("gemm_bt/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmBt<true>)->Name("gemm_bt/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial")->Arg(64)->Arg(1024);
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel")->Arg(64)->Arg(1024);
BENCHMARK(BM_CosineScan<false>)->Name("cosine_scan/serial")->Arg(1000)->Arg(100000);
BENCHMARK(BM_CosineScan<true>)->Name("cosine_scan/parallel")->Arg(1000)->Arg(100000);

BENCHMARK_MAIN();
