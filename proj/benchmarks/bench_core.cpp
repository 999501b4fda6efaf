#include <benchmark/benchmark.h>

#include <random>

#include "bshadow/attacker.hpp"
#include "bshadow/harness.hpp"
#include "bshadow/victims.hpp"
#include "bshadow/zigzagger.hpp"

using namespace bshadow;

static void BM_BtbInsertLookup(benchmark::State& state) {
  uarch::Btb btb;
  std::mt19937_64 rng(1);
  std::vector<VirtualAddress> addrs(4096);
  for (auto& a : addrs) a = VirtualAddress{rng() & 0xFFFFFFFCULL};
  std::size_t i = 0;
  for (auto _ : state) {
    const auto a = addrs[i++ & 4095];
    btb.insert(a, a + 64);
    benchmark::DoNotOptimize(btb.lookup(addrs[(i * 7) & 4095]));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_BtbInsertLookup);

static void BM_InterpretVictim(benchmark::State& state) {
  const auto v = victims::buildModexpMontmul();
  std::mt19937_64 rng(2);
  const auto in = v.randomInput(rng).input;
  std::uint64_t steps = 0;
  for (auto _ : state) {
    const auto t = ir::interpret(v.program, in, 10'000'000);
    steps += t.steps.size();
    benchmark::DoNotOptimize(t.registers);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(steps));
}
BENCHMARK(BM_InterpretVictim);

static void BM_MachineRunWithInterrupts(benchmark::State& state) {
  const auto v = victims::buildModexpMontmul();
  std::mt19937_64 rng(3);
  const auto in = v.randomInput(rng).input;
  harness::RunOptions o;
  o.interrupts = harness::InterruptModel::cacheDisabled();
  for (auto _ : state) {
    harness::Machine m;
    benchmark::DoNotOptimize(harness::runWithInterrupts(m, v.program, in, o).victimCycles);
  }
}
BENCHMARK(BM_MachineRunWithInterrupts);

static void BM_Probe(benchmark::State& state) {
  const auto v = victims::buildModexpMontmul();
  const auto channel = static_cast<attacker::ProbeChannel>(state.range(0));
  const auto& site = v.program.branches().front();
  const auto shadow = attacker::makeShadow(v.program, site.addr, channel);
  harness::Machine m;
  for (auto _ : state) benchmark::DoNotOptimize(attacker::probe(shadow, m).inference);
  state.SetLabel(std::string(attacker::toString(channel)));
}
BENCHMARK(BM_Probe)->Arg(static_cast<int>(attacker::ProbeChannel::LbrFlag))
    ->Arg(static_cast<int>(attacker::ProbeChannel::LbrCycles));

static void BM_ZigzagTransform(benchmark::State& state) {
  const auto v = victims::buildVfprintf();
  for (auto _ : state) benchmark::DoNotOptimize(zigzagger::transform(v.program, {std::nullopt, 1}).program.size());
}
BENCHMARK(BM_ZigzagTransform);

BENCHMARK_MAIN();
