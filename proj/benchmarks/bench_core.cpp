#include <benchmark/benchmark.h>

#include "pls/autodiff.hpp"
#include "pls/linalg.hpp"
#include "pls/models.hpp"
#include "pls/rng.hpp"
#include "pls/training.hpp"

namespace {

using pls::SeededRng;
using pls::Tensor;

void bm_matmul(benchmark::State& state) {
    std::size_t n = static_cast<std::size_t>(state.range(0));
    SeededRng rng(1);
    auto a = pls::gaussian<double>(rng, {n, n});
    auto b = pls::gaussian<double>(rng, {n, n});
    for (auto _ : state) benchmark::DoNotOptimize(pls::matmul(a, b));
}
BENCHMARK(bm_matmul)->Arg(16)->Arg(64)->Arg(128);

void bm_causal_conv(benchmark::State& state) {
    std::size_t n = static_cast<std::size_t>(state.range(0));
    SeededRng rng(2);
    auto h = pls::gaussian<double>(rng, {n, n});
    auto u = pls::gaussian<double>(rng, {n, n});
    for (auto _ : state) benchmark::DoNotOptimize(pls::causal_conv_cols(h, u));
}
BENCHMARK(bm_causal_conv)->Arg(16)->Arg(64);

void bm_circular_conv(benchmark::State& state) {
    std::size_t n = static_cast<std::size_t>(state.range(0));
    SeededRng rng(3);
    auto h = pls::gaussian<double>(rng, {n, n});
    auto u = pls::gaussian<double>(rng, {n, n});
    for (auto _ : state) benchmark::DoNotOptimize(pls::circular_conv_cols(h, u));
}
BENCHMARK(bm_circular_conv)->Arg(16)->Arg(64);

pls::ModelSpec bench_spec(int layers) {
    pls::ModelSpec spec;
    spec.arch = pls::Arch::BaseConv;
    spec.layers = layers;
    spec.emb = 24;
    spec.seq_len = 16;
    spec.in_dim = 6;
    spec.out_dim = 6;
    spec.causal = false;
    return spec;
}

void bm_baseconv_forward(benchmark::State& state) {
    auto spec = bench_spec(static_cast<int>(state.range(0)));
    SeededRng rng(4), init = rng.substream(1);
    auto params = pls::init_params<float>(spec, pls::InitScheme::GaussianScaled, init);
    auto input = pls::gaussian<float>(rng, {16, 6});
    for (auto _ : state) benchmark::DoNotOptimize(pls::model_eval(spec, params, input));
}
BENCHMARK(bm_baseconv_forward)->Arg(1)->Arg(4);

void bm_tape_backward(benchmark::State& state) {
    auto spec = bench_spec(static_cast<int>(state.range(0)));
    SeededRng rng(5), init = rng.substream(1);
    auto params = pls::init_params<float>(spec, pls::InitScheme::GaussianScaled, init);
    auto input = pls::gaussian<float>(rng, {16, 6});
    auto target = pls::gaussian<float>(rng, {16, 6});
    for (auto _ : state) {
        pls::Tape<float> tape;
        auto ids = pls::bind_params(tape, params, true);
        int out = pls::model_forward(tape, spec, ids, tape.leaf(input));
        int loss = tape.mse_loss(out, tape.leaf(target));
        benchmark::DoNotOptimize(tape.backward(loss));
    }
}
BENCHMARK(bm_tape_backward)->Arg(1)->Arg(4);

void bm_adam_step(benchmark::State& state) {
    auto spec = bench_spec(2);
    SeededRng rng(6), init = rng.substream(1);
    auto params = pls::init_params<float>(spec, pls::InitScheme::GaussianScaled, init);
    auto state_adam = pls::make_adam(params, 1e-3);
    pls::GradStore<float> grads = params;
    for (auto _ : state) benchmark::DoNotOptimize(pls::adam_step(state_adam, grads));
}
BENCHMARK(bm_adam_step);

void bm_svd(benchmark::State& state) {
    std::size_t n = static_cast<std::size_t>(state.range(0));
    SeededRng rng(7);
    auto a = pls::gaussian<double>(rng, {n, n / 2});
    for (auto _ : state) benchmark::DoNotOptimize(pls::svd_thin(a));
}
BENCHMARK(bm_svd)->Arg(16)->Arg(40);

}  // namespace

BENCHMARK_MAIN();
