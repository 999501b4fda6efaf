#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <list>

#include "bshadow/harness.hpp"
#include "bshadow/uarch.hpp"
#include "gen.hpp"

using namespace bshadow;
using namespace bshadow::uarch;

namespace {

constexpr std::int64_t kAlias = std::int64_t{1} << 31;

VirtualAddress va(std::uint64_t v) { return VirtualAddress{v}; }

VirtualAddress randomAddr(std::mt19937_64& rng) { return va(rng() & 0x0000FFFFFFFFFFFCULL); }

// Same set, distinct tag for each k.
VirtualAddress inSet(VirtualAddress a, std::uint32_t k) { return va((a.value & 0xFFFF) | (std::uint64_t{k} << 16)); }

}  // namespace

TEST_CASE("btb index and tag") {
  const BtbConfig cfg;
  CHECK(cfg.index(va(0)) == 0);
  CHECK(cfg.index(va(0x1234)) == cfg.index(va(0xABCD00001234ULL)));
  const auto a = va(0x10001234);
  CHECK(cfg.index(a) == cfg.index(a + kAlias));
  CHECK(BtbConfig::tag(a) == BtbConfig::tag(a + kAlias));
  CHECK(cfg.ways * cfg.sets == 4096);
}

TEST_CASE("btb lookup examples") {
  Btb btb;
  const auto a = va(0x10000040), t = va(0x10000080);
  CHECK_FALSE(btb.lookup(a));
  btb.insert(a, t);
  CHECK(btb.lookup(a) == t);
  // Entries hold displacements: an aliased hit lands equally far away.
  CHECK(btb.lookup(a + kAlias) == t + kAlias);
  btb.insert(a, va(0x10000100));
  CHECK(btb.lookup(a) == va(0x10000100));
  CHECK(btb.validEntries() == 1);
}

TEST_CASE("btb invalidate examples") {
  Btb btb;
  const auto a = va(0x10000040);
  btb.invalidate(a);
  CHECK(btb.validEntries() == 0);
  for (std::uint32_t k = 0; k < 4; ++k) btb.insert(inSet(a, 0x1000 + k), va(0x20000000));
  btb.invalidate(inSet(a, 0x1001));
  CHECK(btb.validInSet(btb.config().index(a)) == 3);
  CHECK(btb.peek(inSet(a, 0x1000)));
  CHECK_FALSE(btb.peek(inSet(a, 0x1001)));
  CHECK(btb.peek(inSet(a, 0x1002)));
  CHECK(btb.peek(inSet(a, 0x1003)));

  UarchState st;
  const auto br = va(0x10000100), tgt = va(0x10000200), next = br + 4;
  auto p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  resolveAndTrain(st, BranchKind::Conditional, br, p, {true, tgt});
  p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  resolveAndTrain(st, BranchKind::Conditional, br, p, {false, next});
  CHECK_FALSE(st.btb.peek(br));
}

TEST_CASE("property: collision law over random pairs and structured families") {
  std::mt19937_64 rng(21);
  const BtbConfig cfg;
  for (int i = 0; i < 20000; ++i) {
    const auto a = randomAddr(rng);
    VirtualAddress b;
    switch (i % 3) {
      case 0: b = randomAddr(rng); break;
      case 1: b = va((rng() & ~0xFFFFULL & 0x0000FFFFFFFFFFFFULL) | (a.value & 0xFFFF)); break;  // low 16 equal
      default: b = va((rng() & ~0x7FFFFFFFULL & 0x0000FFFFFFFFFFFFULL) | (a.value & 0x7FFFFFFF)); break;  // low 31 equal
    }
    Btb btb;
    btb.insert(a, a + 64);
    const bool expectHit = cfg.index(a) == cfg.index(b) && BtbConfig::tag(a) == BtbConfig::tag(b);
    REQUIRE(btb.peek(b).has_value() == expectHit);
    if (i % 3 != 0) REQUIRE(cfg.index(a) == cfg.index(b));
    if (i % 3 == 2) REQUIRE(btb.peek(b) == b + 64);
  }
}

TEST_CASE("btb: five distinct tags in one set evict the first") {
  Btb btb;
  const auto a = va(0x10000040);
  for (std::uint32_t k = 0; k < 5; ++k) btb.insert(inSet(a, 0x100 + k), va(0x10000000));
  CHECK_FALSE(btb.peek(inSet(a, 0x100)));
  for (std::uint32_t k = 1; k < 5; ++k) CHECK(btb.peek(inSet(a, 0x100 + k)));
}

TEST_CASE("property: LRU capacity law against a brute-force oracle") {
  std::mt19937_64 rng(22);
  for (int i = 0; i < 20000; ++i) {
    Btb btb;
    std::list<std::uint32_t> oracle;  // front = most recent
    const auto base = randomAddr(rng);
    const int len = static_cast<int>(gen::pick(rng, 1, 8));
    for (int s = 0; s < len; ++s) {
      const auto tag = static_cast<std::uint32_t>(gen::pick(rng, 0, 6));
      const auto addr = inSet(base, tag);
      const auto hit = std::find(oracle.begin(), oracle.end(), tag);
      if (gen::pick(rng, 0, 2) == 0) {
        const bool found = btb.lookup(addr).has_value();
        REQUIRE(found == (hit != oracle.end()));
        if (hit != oracle.end()) oracle.splice(oracle.begin(), oracle, hit);
      } else {
        btb.insert(addr, addr + 8);
        if (hit != oracle.end()) {
          oracle.splice(oracle.begin(), oracle, hit);
        } else {
          oracle.push_front(tag);
          if (oracle.size() > 4) oracle.pop_back();
        }
      }
    }
    for (std::uint32_t tag = 0; tag <= 6; ++tag) {
      const bool present = std::find(oracle.begin(), oracle.end(), tag) != oracle.end();
      REQUIRE(btb.peek(inSet(base, tag)).has_value() == present);
    }
    REQUIRE(btb.validInSet(btb.config().index(base)) == oracle.size());
  }
}

TEST_CASE("predictBranch static rules and stale targets") {
  UarchState st;
  const auto br = va(0x10000100), tgt = va(0x10000200), next = br + 4;
  auto p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  CHECK_FALSE(p.predictedTaken);
  p = predictBranch(st, BranchKind::Indirect, br, std::nullopt, next);
  CHECK(p.predictedTarget == next);
  p = predictBranch(st, BranchKind::Unconditional, br, tgt, next);
  CHECK(p.predictedTaken);
  CHECK(p.predictedTarget == tgt);

  // A stale aliased entry steers an unconditional branch to the wrong target.
  st.btb.insert(br + kAlias, br + kAlias + 0x40);
  p = predictBranch(st, BranchKind::Unconditional, br, tgt, next);
  CHECK(p.predictedTarget == br + 0x40);
  const auto pen = resolveAndTrain(st, BranchKind::Unconditional, br, p, {true, tgt});
  CHECK_FALSE(p.correct);
  CHECK((p.mispredictKind == MispredictKind::Target));
  CHECK(pen == kDefaultPenalty);
}

TEST_CASE("resolveAndTrain penalties") {
  UarchState st;
  const auto br = va(0x10000100), tgt = va(0x10000200), next = br + 4;
  auto p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  CHECK(resolveAndTrain(st, BranchKind::Conditional, br, p, {false, next}) == 0);
  CHECK(p.correct);
  p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  CHECK(resolveAndTrain(st, BranchKind::Conditional, br, p, {true, tgt}) == 20);
  CHECK((p.mispredictKind == MispredictKind::Direction));
}

TEST_CASE("property: gshare counters saturate and move at most one step") {
  std::mt19937_64 rng(23);
  Gshare g;
  for (int i = 0; i < 20000; ++i) {
    const auto a = randomAddr(rng);
    const bool taken = rng() & 1;
    const auto idx = g.index(a);
    const int before = g.counter(idx);
    const auto hist = g.history();
    g.train(a, taken);
    const int after = g.counter(idx);
    REQUIRE(after >= 0);
    REQUIRE(after <= 3);
    REQUIRE(std::abs(after - before) <= 1);
    if (taken) REQUIRE(after == std::min(before + 1, 3));
    if (!taken) REQUIRE(after == std::max(before - 1, 0));
    REQUIRE(g.history() == static_cast<std::uint16_t>((hist << 1) | (taken ? 1 : 0)));
  }
}

TEST_CASE("gshare counter at 3 trained taken stays at 3") {
  UarchState st(PredictorMode::Gshare);
  const auto br = va(0x10000100), tgt = va(0x10000200), next = br + 4;
  // History saturates to all-ones after 16 taken outcomes; then the same
  // counter is trained every time.
  for (int i = 0; i < 40; ++i) {
    auto p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
    resolveAndTrain(st, BranchKind::Conditional, br, p, {true, tgt});
  }
  const auto idx = st.gshare.index(br);
  CHECK(st.gshare.counter(idx) == 3);
  auto p = predictBranch(st, BranchKind::Conditional, br, tgt, next);
  CHECK(p.predictedTaken);
  resolveAndTrain(st, BranchKind::Conditional, br, p, {true, tgt});
  CHECK(st.gshare.counter(idx) == 3);
}

TEST_CASE("property: flush is sound and idempotent") {
  std::mt19937_64 rng(24);
  const BranchKind kinds[] = {BranchKind::Conditional, BranchKind::Unconditional, BranchKind::Indirect};
  for (int i = 0; i < 10000; ++i) {
    const auto mode = (i & 1) ? PredictorMode::Gshare : PredictorMode::BtbOnly;
    UarchState st(mode);
    const int n = static_cast<int>(gen::pick(rng, 0, 30));
    for (int k = 0; k < n; ++k) {
      const auto kind = kinds[gen::pick(rng, 0, 2)];
      const auto a = randomAddr(rng);
      const auto t = randomAddr(rng);
      auto p = predictBranch(st, kind, a, kind == BranchKind::Indirect ? std::nullopt : std::optional{t}, a + 4);
      const bool taken = kind != BranchKind::Conditional || (rng() & 1);
      resolveAndTrain(st, kind, a, p, {taken, taken ? t : a + 4});
    }
    flush(st);
    UarchState fresh(mode);
    REQUIRE(st.btb.validEntries() == 0);
    REQUIRE(st.gshare == fresh.gshare);
    // Predictions after a flush match a predictor that never saw the history.
    for (int k = 0; k < 4; ++k) {
      const auto kind = kinds[k % 3];
      const auto a = randomAddr(rng);
      const auto t = randomAddr(rng);
      const auto so = kind == BranchKind::Indirect ? std::nullopt : std::optional{t};
      const auto p1 = predictBranch(st, kind, a, so, a + 4);
      const auto p2 = predictBranch(fresh, kind, a, so, a + 4);
      REQUIRE(p1.predictedTaken == p2.predictedTaken);
      REQUIRE(p1.predictedTarget == p2.predictedTarget);
    }
    UarchState twice = st;
    flush(twice);
    flush(st);
    REQUIRE(twice.btb.validEntries() == st.btb.validEntries());
    REQUIRE(twice.gshare == st.gshare);
  }
}

TEST_CASE("property: predictions ignore address bits above 30") {
  std::mt19937_64 rng(25);
  const BranchKind kinds[] = {BranchKind::Conditional, BranchKind::Unconditional, BranchKind::Indirect};
  for (int i = 0; i < 10000; ++i) {
    UarchState st;
    const auto a = va(rng() & 0x7FFFFFFCULL);
    const auto t = a + 4 * gen::pick(rng, 2, 100);
    if (rng() & 1) st.btb.insert(a, t);
    const auto high = static_cast<std::int64_t>((rng() & 0xFFFF) << 31);
    const auto kind = kinds[i % 3];
    const auto so = kind == BranchKind::Indirect ? std::nullopt : std::optional{t};
    const auto p1 = predictBranch(st, kind, a, so, a + 4);
    const auto so2 = so ? std::optional{*so + high} : std::nullopt;
    const auto p2 = predictBranch(st, kind, a + high, so2, a + high + 4);
    REQUIRE(p1.predictedTaken == p2.predictedTaken);
    REQUIRE(p1.predictedTarget.has_value() == p2.predictedTarget.has_value());
    if (p1.predictedTarget) REQUIRE(*p2.predictedTarget == *p1.predictedTarget + high);
  }
}

TEST_CASE("lbr capacity and filtering") {
  Lbr lbr;
  for (int i = 0; i < 33; ++i) lbr.append({va(0x1000 + 4 * static_cast<std::uint64_t>(i)), va(0), true, 0, ExecMode::Attacker});
  const auto recs = lbr.read();
  CHECK(recs.size() == 32);
  CHECK(recs.front().from == va(0x1004));
  lbr.append({va(0x9000), va(0), true, 0, ExecMode::Enclave});
  const auto filtered = lbr.read();
  CHECK(std::none_of(filtered.begin(), filtered.end(), [](const LbrRecord& r) { return r.from == va(0x9000); }));
  CHECK(lbr.read(LbrFilter::All).back().from == va(0x9000));
  CHECK(lbr.size() == 32);
}

TEST_CASE("property: LBR records of unconditional branches are always predicted") {
  std::mt19937_64 rng(26);
  std::size_t uncond = 0;
  for (int i = 0; i < 10000; ++i) {
    harness::Machine m;
    // Random stale entries so some jumps mispredict their target.
    for (int k = 0; k < 8; ++k) {
      const auto a = va(0x10000000 + 4 * static_cast<std::uint64_t>(gen::pick(rng, 0, 40)));
      m.uarch().btb.insert(a + kAlias, a + kAlias + 4 * gen::pick(rng, 1, 40));
    }
    const auto p = gen::randomProgram(rng);
    m.runAttacker(p, gen::randomInput(rng), 1000);
    for (const auto& r : m.lbr().read()) {
      const auto site = p.branchAt(r.from);
      REQUIRE(site);
      if (site->kind == BranchKind::Unconditional) {
        ++uncond;
        REQUIRE(r.predicted);
      }
    }
  }
  CHECK(uncond > 1000);
}

TEST_CASE("timing model") {
  TimingChannelModel m(5);
  double sum = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) sum += m.sample(TimingChannel::LbrCycles, false);
  CHECK(sum / n == doctest::Approx(25.69).epsilon(0.01));

  double s1 = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = m.sample(TimingChannel::Rdtscp, true);
    REQUIRE(x >= 1.0);
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n;
  CHECK(std::sqrt(s2 / n - mean * mean) == doctest::Approx(806.56).epsilon(0.02));

  m.setParams(TimingChannel::PtCyc, {50, 0, 70, 0});
  CHECK(m.sample(TimingChannel::PtCyc, false) == 50);
  CHECK(m.sample(TimingChannel::PtCyc, true) == 70);
  CHECK_THROWS_AS(m.sample(static_cast<TimingChannel>(7), false), ConfigError);

  TimingChannelModel a(9), b(9);
  for (int i = 0; i < 100; ++i) REQUIRE(a.sample(TimingChannel::PtCyc, i & 1) == b.sample(TimingChannel::PtCyc, i & 1));

  CHECK(TimingChannelModel::usesGamma(120.61, 806.56));
  CHECK(TimingChannelModel::usesGamma(90.64, 191.48));
  CHECK_FALSE(TimingChannelModel::usesGamma(25.69, 9.72));
  CHECK_FALSE(TimingChannelModel::usesGamma(94.21, 13.10));
}

TEST_CASE("predictor mode names") {
  CHECK((parsePredictorMode("gshare") == PredictorMode::Gshare));
  CHECK(toString(PredictorMode::BtbOnly) == "btb-only");
  CHECK_THROWS_AS(parsePredictorMode("tage"), ConfigError);
}
