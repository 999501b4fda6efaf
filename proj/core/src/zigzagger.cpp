#include "bshadow/zigzagger.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <json.hpp>

#include "bshadow/harness.hpp"

namespace bshadow::zigzagger {

namespace {

std::string origLabel(std::size_t i) { return "zz.L" + std::to_string(i); }
std::string hopLabel(std::size_t i) { return "zz.h" + std::to_string(i); }
std::string trampLabel(std::size_t g, std::size_t j) {
  return "zz.t" + std::to_string(g) + "." + std::to_string(j);
}

}  // namespace

std::vector<std::size_t> TransformReport::fanouts() const {
  std::vector<std::size_t> out;
  for (const auto& t : trampolines) out.push_back(t.targets.size());
  return out;
}

std::set<VirtualAddress> TransformReport::region() const {
  std::set<VirtualAddress> out;
  for (const auto& t : trampolines) {
    out.insert(t.hops.begin(), t.hops.end());
    out.insert(t.trampoline.begin(), t.trampoline.end());
  }
  return out;
}

std::string TransformReport::toJson() const {
  nlohmann::json j;
  j["converted_branches"] = convertedBranches;
  j["converted_conditional"] = convertedConditional;
  j["converted_unconditional"] = convertedUnconditional;
  j["reserved_register"] = ir::regName(reservedRegister);
  j["seed"] = seed;
  j["branches_per_trampoline"] = branchesPerTrampoline ? nlohmann::json(*branchesPerTrampoline) : nlohmann::json("all");
  j["fanouts"] = fanouts();
  auto hex = [](const auto& xs) {
    std::vector<std::string> out;
    for (auto a : xs) out.push_back(toHex(a));
    return out;
  };
  j["back_edges"] = hex(backEdges);
  j["passthrough_indirect"] = hex(passthroughIndirect);
  auto& ts = j["trampolines"] = nlohmann::json::array();
  for (const auto& t : trampolines) {
    ts.push_back({{"sites", hex(t.sites)},
                  {"hops", hex(t.hops)},
                  {"trampoline", hex(t.trampoline)},
                  {"targets", hex(t.targets)}});
  }
  return j.dump(2);
}

TransformResult transform(const ir::Program& program, const ZigzaggerConfig& config) {
  if (config.branchesPerTrampoline && *config.branchesPerTrampoline < 2) {
    throw ConfigError("branches per trampoline must be at least 2");
  }
  if (program.usesRegister(ir::kReservedReg)) {
    throw ConfigError("program uses reserved register " + ir::regName(ir::kReservedReg));
  }
  for (const auto& [name, addr] : program.labels()) {
    if (name.starts_with("zz.")) throw ConfigError("label '" + name + "' clashes with the transform's namespace");
  }

  TransformResult result;
  TransformReport& rep = result.report;
  rep.seed = config.seed;
  rep.branchesPerTrampoline = config.branchesPerTrampoline;

  std::vector<std::size_t> sites;
  for (std::size_t i = 0; i < program.size(); ++i) {
    const auto& instr = program.at(i);
    if (std::holds_alternative<ir::CondBranch>(instr) || std::holds_alternative<ir::Jump>(instr)) {
      sites.push_back(i);
      if (*ir::staticTargetOf(instr) <= program.addressOf(i)) rep.backEdges.push_back(program.addressOf(i));
    } else if (std::holds_alternative<ir::IndirectJump>(instr)) {
      rep.passthroughIndirect.push_back(program.addressOf(i));
    }
  }
  if (sites.empty()) {
    result.program = program;
    return result;
  }

  // Group assignment: seeded shuffle, balanced chunks, lexical order inside.
  std::vector<std::vector<std::size_t>> groups;
  if (!config.branchesPerTrampoline || *config.branchesPerTrampoline >= sites.size()) {
    groups.push_back(sites);
  } else {
    std::vector<std::size_t> order = sites;
    std::mt19937_64 rng(config.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t k = *config.branchesPerTrampoline;
    const std::size_t n = (order.size() + k - 1) / k;
    groups.resize(n);
    for (std::size_t i = 0; i < order.size(); ++i) groups[i % n].push_back(order[i]);
    for (auto& g : groups) std::sort(g.begin(), g.end());
  }
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> where;  // site -> (group, position)
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t j = 0; j < groups[g].size(); ++j) where[groups[g][j]] = {g, j};
  }

  const auto indexLabel = [&](VirtualAddress a) -> std::optional<std::string> {
    if (auto idx = program.indexOf(a)) return origLabel(*idx);
    return std::nullopt;
  };
  const auto remapOperand = [&](const ir::Operand& op) -> ir::ProgramBuilder::SymOperand {
    if (op.kind == ir::Operand::Kind::Addr) {
      if (auto l = indexLabel(VirtualAddress(static_cast<std::uint64_t>(op.value)))) {
        return ir::ProgramBuilder::SymOperand::labelAddr(*l);
      }
    }
    return op;
  };

  ir::ProgramBuilder b(program.base());
  std::map<VirtualAddress, std::vector<std::string>> userLabels;
  for (const auto& [name, addr] : program.labels()) userLabels[addr].push_back(name);

  const ir::Reg rt = ir::kReservedReg;
  for (std::size_t i = 0; i < program.size(); ++i) {
    b.label(origLabel(i));
    if (auto it = userLabels.find(program.addressOf(i)); it != userLabels.end()) {
      for (const auto& n : it->second) b.label(n);
    }
    const auto& instr = program.at(i);
    if (auto w = where.find(i); w != where.end()) {
      const auto [g, j] = w->second;
      if (const auto* br = std::get_if<ir::CondBranch>(&instr)) {
        b.mov(rt, ir::ProgramBuilder::SymOperand::labelAddr(origLabel(i + 1)));
        b.cmov(br->predicate, rt, *indexLabel(br->target));
        ++rep.convertedConditional;
      } else {
        const auto& jmp = std::get<ir::Jump>(instr);
        b.mov(rt, ir::ProgramBuilder::SymOperand::labelAddr(*indexLabel(jmp.target)));
        ++rep.convertedUnconditional;
      }
      b.label(hopLabel(i)).jmp(trampLabel(g, j));
      continue;
    }
    if (const auto* s = std::get_if<ir::SetReg>(&instr)) {
      if (const auto* e = std::get_if<ir::Expr>(&s->source)) {
        b.op(e->op, s->dst, remapOperand(e->lhs), remapOperand(e->rhs));
      } else {
        const auto& in = std::get<ir::InputRef>(s->source);
        b.input(s->dst, in.name, in.index);
      }
    } else if (const auto* c = std::get_if<ir::Compute>(&instr)) {
      b.compute(c->cost);
    } else if (const auto* ij = std::get_if<ir::IndirectJump>(&instr)) {
      b.ijmp(ij->reg);
    } else if (const auto* cm = std::get_if<ir::CondMove>(&instr)) {
      b.cmov(cm->predicate, cm->dest, *indexLabel(cm->value));
    } else {
      b.halt();
    }
  }
  b.label(origLabel(program.size()));
  if (auto it = userLabels.find(program.end()); it != userLabels.end()) {
    for (const auto& n : it->second) b.label(n);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t j = 0; j < groups[g].size(); ++j) {
      b.label(trampLabel(g, j));
      if (j + 1 < groups[g].size()) {
        b.jmp(hopLabel(groups[g][j + 1]));
      } else {
        b.ijmp(rt);
      }
    }
  }
  for (const auto& [name, addr] : program.entries()) b.entry(name, *indexLabel(addr));
  if (b.size() > config.maxImageInstructions) {
    throw ConfigError("transformed image of " + std::to_string(b.size()) + " instructions exceeds the " +
                      std::to_string(config.maxImageInstructions) + "-instruction placement limit");
  }
  result.program = b.build();

  const ir::Program& out = result.program;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    TrampolineInfo info;
    for (std::size_t j = 0; j < groups[g].size(); ++j) {
      const std::size_t i = groups[g][j];
      info.sites.push_back(program.addressOf(i));
      info.hops.push_back(out.labelOrThrow(hopLabel(i)));
      info.trampoline.push_back(out.labelOrThrow(trampLabel(g, j)));
      const auto& instr = program.at(i);
      info.targets.insert(out.labelOrThrow(*indexLabel(*ir::staticTargetOf(instr))));
      if (std::holds_alternative<ir::CondBranch>(instr)) info.targets.insert(out.labelOrThrow(origLabel(i + 1)));
    }
    rep.trampolines.push_back(std::move(info));
  }
  rep.convertedBranches = sites.size();
  return result;
}

Overhead measureOverhead(const ir::Program& original, const ir::Program& transformed,
                         const std::vector<ir::Input>& inputs, std::uint64_t fuel) {
  Overhead o;
  double logI = 0, logC = 0;
  harness::RunOptions opts;
  opts.interruptsEnabled = false;
  opts.fuel = fuel;
  for (const auto& in : inputs) {
    harness::Machine m0, m1;
    const auto r0 = harness::runWithInterrupts(m0, original, in, opts);
    const auto r1 = harness::runWithInterrupts(m1, transformed, in, opts);
    const double ri = static_cast<double>(r1.victimInstructions) / static_cast<double>(r0.victimInstructions);
    const double rc = static_cast<double>(r1.victimCycles) / static_cast<double>(r0.victimCycles);
    o.instructionRatios.push_back(ri);
    o.cycleRatios.push_back(rc);
    logI += std::log(ri);
    logC += std::log(rc);
  }
  if (!inputs.empty()) {
    o.geomeanInstructions = std::exp(logI / static_cast<double>(inputs.size()));
    o.geomeanCycles = std::exp(logC / static_cast<double>(inputs.size()));
  }
  return o;
}

std::vector<VirtualAddress> directBranchSequence(const ir::Program& program,
                                                 const std::optional<std::set<VirtualAddress>>& region,
                                                 const ir::Input& input, std::uint64_t fuel) {
  const auto trace = ir::interpret(program, input, fuel);
  std::vector<VirtualAddress> seq;
  std::set<VirtualAddress> seen;
  for (const auto& s : trace.steps) {
    if (!s.branch) continue;
    const auto kind = ir::branchKindOf(program.at(*program.indexOf(s.addr)));
    if (kind == BranchKind::Indirect) continue;
    if (region && !region->contains(s.addr)) continue;
    if (seen.insert(s.addr).second) seq.push_back(s.addr);
  }
  return seq;
}

bool leakageCheck(const ir::Program& program, const std::optional<std::set<VirtualAddress>>& region,
                  const ir::Input& a, const ir::Input& b, std::uint64_t fuel) {
  return directBranchSequence(program, region, a, fuel) == directBranchSequence(program, region, b, fuel);
}

}  // namespace bshadow::zigzagger
