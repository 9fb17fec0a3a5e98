// Microbenchmarks for the hot paths: heat kernel evaluation, bridge sampling,
// holonomy transport, soup replica visitation, and the spectral oracle.

#include <benchmark/benchmark.h>

#include <loopdet/connection.hpp>
#include <loopdet/loop_soup.hpp>
#include <loopdet/paths.hpp>
#include <loopdet/rng.hpp>
#include <loopdet/spectral.hpp>
#include <loopdet/torus.hpp>

#include <complex>
#include <vector>

namespace {

using loopdet::ConnectionSpec;
using loopdet::LoopPath;
using loopdet::Mat;
using loopdet::SoupConfig;
using loopdet::SoupSampler;
using loopdet::SpectralModel;
using loopdet::TorusSpec;
using loopdet::Vec;

const double kDurations[] = {1e-3, 1e-1, 1e1};

ConnectionSpec su2_axis() {
  const std::complex<double> i(0.0, 1.0);
  Mat sx(2, 2), sy(2, 2);
  sx << 0, 1, 1, 0;
  sy << 0, -i, i, 0;
  return ConnectionSpec::constant({0.5 * i * sx, 0.5 * i * sy});
}

LoopPath make_path(int n_steps) {
  const TorusSpec torus = TorusSpec::unit(2);
  loopdet::Rng rng = loopdet::make_stream(1, {99, static_cast<std::uint64_t>(n_steps)});
  return loopdet::sample_bridge(torus, 0.5, {0.1, 0.2, 0.0}, {0.1, 0.2, 0.0}, n_steps, rng);
}

void BM_HeatKernelDiag(benchmark::State& state) {
  const TorusSpec torus = TorusSpec::unit(2);
  const double t = kDurations[state.range(0)];
  for (auto _ : state) benchmark::DoNotOptimize(loopdet::heat_kernel_diag(torus, t));
}
BENCHMARK(BM_HeatKernelDiag)->Arg(0)->Arg(1)->Arg(2);

void BM_HeatKernel(benchmark::State& state) {
  const TorusSpec torus = TorusSpec::unit(2);
  const Vec x{0.0, 0.0, 0.0}, y{0.3, 0.4, 0.0};
  for (auto _ : state) benchmark::DoNotOptimize(loopdet::heat_kernel(torus, 0.5, x, y));
}
BENCHMARK(BM_HeatKernel);

void BM_SampleBridge(benchmark::State& state) {
  const TorusSpec torus = TorusSpec::unit(2);
  const int n_steps = static_cast<int>(state.range(0));
  loopdet::Rng rng = loopdet::make_stream(1, {7});
  const Vec x{0.1, 0.2, 0.0};
  for (auto _ : state)
    benchmark::DoNotOptimize(loopdet::sample_bridge(torus, 0.5, x, x, n_steps, rng));
  state.SetItemsProcessed(state.iterations() * n_steps);
}
BENCHMARK(BM_SampleBridge)->Arg(64)->Arg(512)->Arg(4096);

void BM_HolonomyAbelian(benchmark::State& state) {
  const LoopPath path = make_path(static_cast<int>(state.range(0)));
  const ConnectionSpec conn = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});
  for (auto _ : state) benchmark::DoNotOptimize(loopdet::holonomy(path, conn));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_HolonomyAbelian)->Arg(512)->Arg(4096);

void BM_HolonomySU2(benchmark::State& state) {
  const LoopPath path = make_path(static_cast<int>(state.range(0)));
  const ConnectionSpec conn = su2_axis();
  for (auto _ : state) benchmark::DoNotOptimize(loopdet::holonomy(path, conn));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_HolonomySU2)->Arg(512)->Arg(4096);

// One replica of the full soup, counting events without realizing bridges.
void BM_SoupReplicaScan(benchmark::State& state) {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  const SoupSampler sampler(cfg);
  std::size_t events = 0;
  for (auto _ : state) {
    sampler.visit_replica(1, 0, [&](const loopdet::LoopEvent& ev, loopdet::PathMaker&) {
      benchmark::DoNotOptimize(ev.duration);
      ++events;
    });
  }
  state.counters["events_per_replica"] =
      static_cast<double>(events) / static_cast<double>(state.iterations());
}
BENCHMARK(BM_SoupReplicaScan);

// One replica with every bridge realized (moderate window and step policy).
void BM_SoupReplicaPaths(benchmark::State& state) {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 0.01;
  cfg.t_max = 5.0;
  cfg.steps = {64, 1e-2};
  const SoupSampler sampler(cfg);
  std::size_t points = 0;
  for (auto _ : state) {
    sampler.visit_replica(1, 0, [&](const loopdet::LoopEvent&, loopdet::PathMaker& make) {
      points += make().lift.size();
    });
  }
  state.counters["points_per_replica"] =
      static_cast<double>(points) / static_cast<double>(state.iterations());
}
BENCHMARK(BM_SoupReplicaPaths);

void BM_SpectralHeatTrace(benchmark::State& state) {
  const TorusSpec torus = TorusSpec::unit(2);
  const double t = kDurations[state.range(0)];
  const int box = loopdet::spectral_box_for(torus, t);
  const SpectralModel model(torus, ConnectionSpec::flat_abelian({0.3, 0.0, 0.0}), 1.0, box);
  for (auto _ : state) benchmark::DoNotOptimize(model.heat_trace(t));
}
BENCHMARK(BM_SpectralHeatTrace)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMicrosecond);

// Full spectral oracle for the abelian pair: the per-run fixed cost of
// oracle-checked estimates.
void BM_ZetaPrimeDiff(benchmark::State& state) {
  const TorusSpec torus = TorusSpec::unit(2);
  const int box = loopdet::spectral_box_for(torus, 1e-3);
  const SpectralModel twisted(torus, ConnectionSpec::flat_abelian({0.3, 0.0, 0.0}), 1.0, box);
  const SpectralModel free_conn(torus, ConnectionSpec::trivial(1), 1.0, box);
  for (auto _ : state)
    benchmark::DoNotOptimize(loopdet::zeta_prime_diff(twisted, free_conn, 1e-3));
}
BENCHMARK(BM_ZetaPrimeDiff)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
