#pragma once

// Branch obfuscation: direct branches become unconditional hops through a
// trampoline that ends in one indirect jump on a reserved register.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bshadow/ir.hpp"

namespace bshadow::zigzagger {

struct ZigzaggerConfig {
  // Branches per trampoline; nullopt merges every branch into one trampoline.
  std::optional<std::uint32_t> branchesPerTrampoline;
  std::uint64_t seed = 0;
  std::size_t maxImageInstructions = 1u << 16;
};

struct TrampolineInfo {
  std::vector<VirtualAddress> sites;       // original branch addresses, hop order
  std::vector<VirtualAddress> hops;        // transformed hop jumps
  std::vector<VirtualAddress> trampoline;  // trampoline jumps; last one is indirect
  std::set<VirtualAddress> targets;        // possible indirect targets (transformed addresses)
};

struct TransformReport {
  std::vector<TrampolineInfo> trampolines;
  std::size_t convertedBranches = 0;
  std::size_t convertedConditional = 0;
  std::size_t convertedUnconditional = 0;
  ir::Reg reservedRegister = ir::kReservedReg;
  std::uint64_t seed = 0;
  std::optional<std::uint32_t> branchesPerTrampoline;
  std::vector<VirtualAddress> backEdges;          // original addresses
  std::vector<VirtualAddress> passthroughIndirect;  // original addresses

  std::vector<std::size_t> fanouts() const;
  // Direct branches introduced by the transform (hops and trampoline jumps).
  std::set<VirtualAddress> region() const;
  std::string toJson() const;
};

struct TransformResult {
  ir::Program program;
  TransformReport report;
};

TransformResult transform(const ir::Program& program, const ZigzaggerConfig& config = {});

struct Overhead {
  std::vector<double> instructionRatios;
  std::vector<double> cycleRatios;
  double geomeanInstructions = 1.0;
  double geomeanCycles = 1.0;
};

Overhead measureOverhead(const ir::Program& original, const ir::Program& transformed,
                         const std::vector<ir::Input>& inputs, std::uint64_t fuel = 1'000'000);

// Distinct direct-branch sources executed inside `region` (all direct
// branches when absent), in order of first execution.
std::vector<VirtualAddress> directBranchSequence(const ir::Program& program,
                                                 const std::optional<std::set<VirtualAddress>>& region,
                                                 const ir::Input& input, std::uint64_t fuel = 1'000'000);

bool leakageCheck(const ir::Program& program, const std::optional<std::set<VirtualAddress>>& region,
                  const ir::Input& a, const ir::Input& b, std::uint64_t fuel = 1'000'000);

}  // namespace bshadow::zigzagger
