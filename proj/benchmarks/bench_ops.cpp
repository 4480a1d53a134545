#include <benchmark/benchmark.h>

#include "mvvd/nn_ops.hpp"
#include "mvvd/rng.hpp"
#include "mvvd/tape.hpp"

namespace {

using namespace mvvd;

AxisTensor<float> randn(std::vector<Axis> axes, uint64_t seed) {
  int64_t n = 1;
  for (const auto& a : axes) n *= a.size;
  std::vector<float> v(static_cast<size_t>(n));
  Rng rng(seed);
  rng.fill_normal(std::span<float>(v));
  return AxisTensor<float>(std::move(axes), std::move(v));
}

void bm_rearrange(benchmark::State& state) {
  auto t = randn({{"b", 2}, {"v", 4}, {"f", 8}, {"c", 32}, {"h", 16}, {"w", 16}}, 1);
  for (auto _ : state) {
    auto r = rearrange(t, "b v f c h w -> (b f) (v h w) c");
    benchmark::DoNotOptimize(const_cast<float*>(r.raw()));
  }
  state.SetBytesProcessed(int64_t(state.iterations()) * t.numel() * sizeof(float));
}
BENCHMARK(bm_rearrange);

void bm_conv2d_forward(benchmark::State& state) {
  const int64_t c = state.range(0);
  auto x = randn({{"n", 8}, {"c", c}, {"h", 16}, {"w", 16}}, 2);
  auto w = randn({{"o", c}, {"i", c}, {"kh", 3}, {"kw", 3}}, 3);
  for (auto _ : state) {
    Tape<float> t;
    auto y = conv2d(t, t.constant(x), t.constant(w), 1, 1);
    benchmark::DoNotOptimize(const_cast<float*>(t.value(y).raw()));
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 8 * c * c * 9 * 16 * 16);
}
BENCHMARK(bm_conv2d_forward)->Arg(32)->Arg(64);

void bm_attention_forward(benchmark::State& state) {
  const int64_t L = state.range(0);
  auto q = randn({{"g", 8}, {"s", L}, {"d", 64}}, 4);
  auto k = randn({{"g", 8}, {"s2", L}, {"d", 64}}, 5);
  auto v = randn({{"g", 8}, {"s2", L}, {"e", 64}}, 6);
  for (auto _ : state) {
    Tape<float> t;
    auto y = attention(t, t.constant(q), t.constant(k), t.constant(v),
                       AttentionOptions{4, false});
    benchmark::DoNotOptimize(const_cast<float*>(t.value(y).raw()));
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 8 * L * L * 64 * 2);
}
BENCHMARK(bm_attention_forward)->Arg(64)->Arg(256);

void bm_attention_canonical(benchmark::State& state) {
  const int64_t L = state.range(0);
  auto q = randn({{"g", 8}, {"s", L}, {"d", 64}}, 4);
  auto k = randn({{"g", 8}, {"s2", L}, {"d", 64}}, 5);
  auto v = randn({{"g", 8}, {"s2", L}, {"e", 64}}, 6);
  for (auto _ : state) {
    Tape<float> t;
    auto y = attention(t, t.constant(q), t.constant(k), t.constant(v),
                       AttentionOptions{4, true});
    benchmark::DoNotOptimize(const_cast<float*>(t.value(y).raw()));
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 8 * L * L * 64 * 2);
}
BENCHMARK(bm_attention_canonical)->Arg(64)->Arg(256);

void bm_matmul_forward(benchmark::State& state) {
  const int64_t n = state.range(0);
  auto x = randn({{"r", n}, {"d", n}}, 7);
  auto w = randn({{"d", n}, {"e", n}}, 8);
  for (auto _ : state) {
    Tape<float> t;
    auto y = matmul(t, t.constant(x), t.constant(w));
    benchmark::DoNotOptimize(const_cast<float*>(t.value(y).raw()));
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * n * n * n);
}
BENCHMARK(bm_matmul_forward)->Arg(128)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
