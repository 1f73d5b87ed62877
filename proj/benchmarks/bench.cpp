#include <benchmark/benchmark.h>

#include "decontext/attack.hpp"
#include "decontext/trainer.hpp"

using namespace decontext;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1, "bench/matmul");
  Tensor a = rng.normal_tensor({n, n}), b = rng.normal_tensor({n, n});
  for (auto _ : state) {
    Graph<float> g;
    auto c = matmul(g.input(a), g.input(b));
    benchmark::DoNotOptimize(c.value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(136)->Arg(256);

void BM_Forward(benchmark::State& state) {
  Model m = Model::initialized(ModelConfig{}, 1);
  m.set_requires_grad(false);
  Rng rng(2, "bench/forward");
  const Tensor z = rng.normal_tensor({3, 16, 16}), ctx = render_context({2, 3});
  const bool record = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(forward_velocity(m, z, 990, ctx, 4, record, false).velocity[0]);
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_FlowLossBackward(benchmark::State& state) {
  Model m = Model::initialized(ModelConfig{}, 1);
  Rng data(0, "unused"), noise(3, "bench/noise");
  const auto s = gen_sample({4, 2}, 7, data);
  const Tensor eps = noise.normal_tensor({3, 16, 16});
  for (auto _ : state) {
    m.zero_grad();
    Graph<float> g;
    auto loss = flow_loss(g, m, s, 500, eps);
    g.backward(loss);
  }
}
BENCHMARK(BM_FlowLossBackward)->Unit(benchmark::kMillisecond);

void BM_AttackStep(benchmark::State& state) {
  const Model m = Model::initialized(ModelConfig{}, 1);
  const Tensor clean = render_context({5, 5});
  AttackConfig c;
  c.steps = 1;
  const bool decontext = state.range(0) == 0;
  for (auto _ : state) {
    auto st = decontext ? decontext_attack(m, clean, c) : diffpgd_attack(m, clean, c, PgdMode::kUntargeted);
    benchmark::DoNotOptimize(st.x_adv[0]);
  }
  state.SetLabel(decontext ? "decontext" : "diffpgd");
}
BENCHMARK(BM_AttackStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
