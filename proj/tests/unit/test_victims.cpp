#include <doctest.h>

#include <set>

#include "bshadow/victims.hpp"

using namespace bshadow;
using namespace bshadow::victims;

namespace {

// x^e mod n through the victim program plus one closing REDC.
std::uint64_t victimPow(std::uint64_t x, std::uint64_t e, int bits, std::uint32_t n) {
  const auto v = buildModexpMontmul();
  const Params p{{"exponent", std::to_string(e)},
                 {"bits", std::to_string(bits)},
                 {"modulus", std::to_string(n)},
                 {"base", std::to_string(x)}};
  const auto t = ir::interpret(v.program, v.lower(p).input, 10'000'000);
  REQUIRE(t.halted);
  return montgomeryMul(static_cast<std::uint64_t>(t.registers[5]), 1, n, montgomeryNPrime(n));
}

}  // namespace

TEST_CASE("Montgomery helpers against big-integer references") {
  CHECK(montgomeryNPrime(1000003) == 2273207701u);
  CHECK(montgomeryNPrime(2147483647) == 2147483649u);
  CHECK(montgomeryNPrime(1073741827) == 2505397589u);
  CHECK(montgomeryMul(123456, 654321, 1000003, montgomeryNPrime(1000003)) == 85468);
  // n * n' == -1 mod 2^32
  for (std::uint32_t n : {3u, 1000003u, 2147483647u, 4294967291u}) {
    CHECK(static_cast<std::uint32_t>(n * montgomeryNPrime(n)) == 0xFFFFFFFFu);
  }
}

TEST_CASE("modular exponentiation victim matches pow()") {
  CHECK(victimPow(12345, 11, 4, 1000003) == 432842);
  CHECK(victimPow(987654, 0xDEADBEEF, 32, 1000003) == 250223);
  CHECK(victimPow(5, 123456789, 27, 2147483647) == 1891294900);
}

TEST_CASE("strtol on -42 reveals sign and length") {
  const auto v = buildStrtol();
  const Params p{{"text", "-42"}, {"base", "10"}};
  const auto t = ir::interpret(v.program, v.lower(p).input, 100000);
  REQUIRE(t.halted);
  const auto leak = v.leakFromPath(v.program, t.steps);
  CHECK(leak.at("sign") == "neg");
  CHECK(leak.at("length") == "2");
  CHECK(leak == v.groundTruth(p));
}

TEST_CASE("victim registry") {
  const auto all = names();
  CHECK(all.size() == 6);
  CHECK(std::set<std::string>(all.begin(), all.end()).size() == all.size());
  CHECK(corpus().size() == 5);
  for (const auto& n : all) CHECK(byName(n).name == n);
  CHECK_THROWS_AS(byName("openssl"), ConfigError);
  for (const auto& v : allVictims()) {
    CHECK(v.program.base() == kVictimBase);
    CHECK_FALSE(v.secretSchema.empty());
    CHECK_FALSE(v.leakDescription.empty());
  }
}

TEST_CASE("property: control-flow leak equals the independent reference") {
  for (const auto& v : allVictims()) {
    std::mt19937_64 rng(61);
    for (int i = 0; i < 2000; ++i) {
      const auto in = v.randomInput(rng);
      const auto t = ir::interpret(v.program, in.input, 10'000'000);
      REQUIRE(t.halted);
      const auto leak = v.leakFromPath(v.program, t.steps);
      const auto truth = v.groundTruth(in.params);
      REQUIRE(leak == truth);
      for (const auto& k : v.secretSchema) REQUIRE(truth.contains(k));
      // Lowering is a pure function of the parameters.
      REQUIRE(v.lower(in.params).input == in.input);
    }
  }
}
