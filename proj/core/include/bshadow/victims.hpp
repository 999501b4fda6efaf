#pragma once

// Victim programs modelled on the attacked library routines, with reference
// oracles for what their control flow reveals.

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bshadow/ir.hpp"

namespace bshadow::victims {

inline constexpr VirtualAddress kVictimBase{0x10000000};

using Params = std::map<std::string, std::string>;
using Leak = std::map<std::string, std::string>;

struct VictimInput {
  Params params;
  ir::Input input;  // params lowered to the program's input arrays
};

struct VictimSpec {
  std::string name;
  ir::Program program;
  std::vector<std::string> secretSchema;  // keys of the leak map
  std::string leakDescription;

  std::function<VictimInput(const Params&)> lower;
  // Expected leak computed from the parameters by an independent reference.
  std::function<Leak(const Params&)> groundTruth;
  // Leak read off an executed control-flow path of `program` (or of any
  // program that keeps its labels).
  std::function<Leak(const ir::Program&, const std::vector<ir::TraceStep>&)> leakFromPath;
  std::function<VictimInput(std::mt19937_64&)> randomInput;
};

VictimSpec buildStrtol();
VictimSpec buildVfprintf();
VictimSpec buildModexpMontmul();
VictimSpec buildLibsvmKernel();
VictimSpec buildApacheLookup();
// if / else-if / else snippet used to illustrate the trampoline transform.
VictimSpec buildSelector();

// Attack targets (criterion victims), in a fixed order.
std::vector<VictimSpec> corpus();
// corpus() plus the selector.
std::vector<VictimSpec> allVictims();
VictimSpec byName(std::string_view name);
std::vector<std::string> names();

// Montgomery helpers shared with tests.
std::uint32_t montgomeryNPrime(std::uint32_t n);
// a * b * 2^-32 mod n for a, b < n; `subtracted` reports the final correction.
std::uint64_t montgomeryMul(std::uint64_t a, std::uint64_t b, std::uint32_t n, std::uint32_t nprime,
                            bool* subtracted = nullptr);

}  // namespace bshadow::victims
