#include <benchmark/benchmark.h>

#include "movelab/data.hpp"
#include "movelab/model.hpp"
#include "movelab/rng.hpp"
#include "movelab/tape.hpp"
#include "movelab/trainer.hpp"

using namespace movelab;

namespace {

Array random_array(Shape shape, uint64_t seed) {
  Array a(std::move(shape));
  Rng rng(seed);
  for (double& x : a.data()) x = rng.normal();
  return a;
}

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Tape t;
  Value a = t.constant(random_array({n, n}, 1));
  Value b = t.constant(random_array({n, n}, 2));
  for (auto _ : state) {
    Value c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

ModelConfig bench_config(Variant variant, int64_t scale) {
  ModelConfig c;
  c.layers = 4;
  c.width = 128;
  c.heads = 4;
  c.vocab = 578;
  c.context = 32;
  c.variant = variant;
  c.scale = scale;
  c.seed = 1;
  if (c.is_mla()) {
    c.latent_dim = 16;
    c.latent_heads = 4;
  }
  return c;
}

Batch bench_batch(int64_t batch, int64_t seq, int64_t vocab) {
  Rng rng(3);
  Batch b;
  b.batch = batch;
  b.seq = seq;
  b.inputs.resize(static_cast<size_t>(batch * seq));
  b.targets.resize(static_cast<size_t>(batch * seq));
  for (auto& t : b.inputs) t = rng.uniform_int(vocab);
  for (auto& t : b.targets) t = rng.uniform_int(vocab);
  return b;
}

void BM_ForwardLogits(benchmark::State& state) {
  tune_host_allocator();
  ModelParams p = build_model(bench_config(static_cast<Variant>(state.range(0)), state.range(1)));
  perturb_params(p, 0.02, 5);
  Batch batch = bench_batch(4, 32, p.config.vocab);
  for (auto _ : state) {
    Tape t;
    BoundModel m = bind_model(t, p, false);
    Value logits = forward_logits(m, batch.inputs, batch.batch);
    benchmark::DoNotOptimize(logits.data().data());
  }
  state.SetItemsProcessed(state.iterations() * batch.inputs.size());
}
BENCHMARK(BM_ForwardLogits)
    ->Args({static_cast<int64_t>(Variant::standard), 0})
    ->Args({static_cast<int64_t>(Variant::move), 4})
    ->Args({static_cast<int64_t>(Variant::mla_move), 4});

void BM_TrainStep(benchmark::State& state) {
  tune_host_allocator();
  ModelParams p = build_model(bench_config(static_cast<Variant>(state.range(0)), state.range(1)));
  AdamState opt = init_adam_state(p);
  TrainConfig tc;
  tc.steps = 1 << 20;
  tc.batch_seq = 4;
  tc.seq_len = 32;
  tc.lr = 1e-3;
  Batch batch = bench_batch(tc.batch_seq, tc.seq_len, p.config.vocab);
  int64_t step = 0;
  for (auto _ : state) {
    StepResult r = train_step(p, opt, batch, tc, step++);
    benchmark::DoNotOptimize(r.mean_loss_nats);
  }
  state.SetItemsProcessed(state.iterations() * batch.inputs.size());
}
BENCHMARK(BM_TrainStep)
    ->Args({static_cast<int64_t>(Variant::standard), 0})
    ->Args({static_cast<int64_t>(Variant::move), 4})
    ->Unit(benchmark::kMillisecond);

void BM_DecodeStep(benchmark::State& state) {
  tune_host_allocator();
  ModelParams p = build_model(bench_config(static_cast<Variant>(state.range(0)), state.range(1)));
  perturb_params(p, 0.02, 7);
  Rng rng(9);
  DecodeState decode = make_decode_state(p);
  int64_t produced = 0;
  for (auto _ : state) {
    if (decode.len >= p.config.context) decode = make_decode_state(p);
    Array logits = decode_logits(p, decode, rng.uniform_int(p.config.vocab));
    benchmark::DoNotOptimize(logits.data().data());
    ++produced;
  }
  state.SetItemsProcessed(produced);
}
BENCHMARK(BM_DecodeStep)
    ->Args({static_cast<int64_t>(Variant::move), 4})
    ->Args({static_cast<int64_t>(Variant::mla_move), 4});

}  // namespace

BENCHMARK_MAIN();
