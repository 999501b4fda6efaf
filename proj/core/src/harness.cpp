#include "bshadow/harness.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace bshadow::harness {

using uarch::LbrRecord;

InterruptModel InterruptModel::parse(std::string_view s) {
  if (s == "normal") return normal();
  if (s == "cache-disabled") return cacheDisabled();
  throw ConfigError("unknown interrupt model '" + std::string(s) + "'");
}

std::uint64_t InterruptModel::sample(std::mt19937_64& rng) const {
  if (sigma <= 0) return static_cast<std::uint64_t>(std::max(1.0, std::round(meanInstrsPerWindow)));
  std::normal_distribution<double> n(meanInstrsPerWindow, sigma);
  const double v = std::round(n(rng));
  return v < 1 ? 1 : static_cast<std::uint64_t>(v);
}

FlushPolicy FlushPolicy::periodic(std::uint64_t period) {
  if (period == 0) throw ConfigError("periodic flush needs a positive period");
  return {Kind::Periodic, period};
}

FlushPolicy FlushPolicy::parse(std::string_view s) {
  if (s == "none") return none();
  if (s == "on-switch") return onEnclaveSwitch();
  if (s.starts_with("periodic:")) {
    auto digits = s.substr(9);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    if (ec != std::errc{} || p != digits.data() + digits.size()) {
      throw ConfigError("bad flush period '" + std::string(digits) + "'");
    }
    return periodic(v);
  }
  throw ConfigError("unknown flush policy '" + std::string(s) + "'");
}

std::string FlushPolicy::toString() const {
  switch (kind) {
    case Kind::None: return "none";
    case Kind::OnEnclaveSwitch: return "on-switch";
    case Kind::Periodic: return "periodic:" + std::to_string(periodCycles);
  }
  return "none";
}

Machine::Machine(uarch::PredictorMode mode, std::uint64_t timingSeed, std::uint32_t penalty)
    : state_(mode), timing_(timingSeed) {
  state_.penalty = penalty;
}

void Machine::setFlushPolicy(FlushPolicy policy) {
  policy_ = policy;
  nextFlush_ = policy.kind == FlushPolicy::Kind::Periodic ? clock_ + policy.periodCycles : 0;
}

void Machine::switchTo(ExecMode mode) {
  if (mode == mode_) return;
  mode_ = mode;
  pendingMispredict_ = false;
  if (policy_.kind == FlushPolicy::Kind::OnEnclaveSwitch) flush();
}

void Machine::flush() {
  uarch::flush(state_);
  ++flushes_;
}

void Machine::restore(const Snapshot& s) {
  state_ = s.state;
  nextFlush_ = s.nextFlush;
}

void Machine::recordBranch(const StepInfo& info) {
  if (!info.step.branch->taken) {
    pendingMispredict_ = pendingMispredict_ || !info.prediction.correct;
    return;
  }
  LbrRecord r;
  r.from = info.step.addr;
  r.to = info.step.branch->target;
  r.predicted = *info.kind == BranchKind::Unconditional || info.prediction.correct;
  r.elapsedCycles = timing_.sample(uarch::TimingChannel::LbrCycles, pendingMispredict_);
  r.context = mode_;
  lbr_.append(r);
  pendingMispredict_ = !info.prediction.correct;
}

StepInfo Machine::step(ir::Executor& ex) {
  if (policy_.kind == FlushPolicy::Kind::Periodic) {
    while (clock_ >= nextFlush_) {
      flush();
      nextFlush_ += policy_.periodCycles;
    }
  }

  const ir::Instruction& instr = ex.current();
  const VirtualAddress pc = ex.pc();
  StepInfo info;
  info.kind = ir::branchKindOf(instr);
  if (info.kind) {
    info.prediction = uarch::predictBranch(state_, *info.kind, pc, ir::staticTargetOf(instr),
                                           pc + static_cast<std::int64_t>(kInstructionStride));
  }
  info.step = ex.step();
  if (info.kind) {
    const uarch::Resolved actual{info.step.branch->taken,
                                 info.step.branch->taken
                                     ? info.step.branch->target
                                     : pc + static_cast<std::int64_t>(kInstructionStride)};
    info.penalty = uarch::resolveAndTrain(state_, *info.kind, pc, info.prediction, actual);
    recordBranch(info);
  }
  info.cycles = ir::instructionCost(instr) + info.penalty;
  clock_ += info.cycles;
  return info;
}

ir::ArchTrace Machine::runAttacker(const ir::Program& program, const ir::Input& input,
                                   std::uint64_t fuel) {
  switchTo(ExecMode::Attacker);
  ir::Executor ex(program, input);
  ir::ArchTrace trace;
  while (!ex.halted()) {
    if (trace.steps.size() >= fuel) {
      trace.fuelExhausted = true;
      break;
    }
    trace.steps.push_back(step(ex).step);
  }
  trace.halted = ex.halted();
  trace.registers = ex.registers();
  return trace;
}

RunReport runWithInterrupts(Machine& machine, const ir::Program& victim, const ir::Input& input,
                            const RunOptions& options, const ProbeCallback& callback) {
  if (options.fuel == 0) throw ConfigError("fuel must be positive");
  machine.setFlushPolicy(options.flush);
  std::mt19937_64 rng(options.seed);
  RunReport report;
  ir::Executor ex(victim, input);
  const std::uint64_t startClock = machine.clock();

  machine.switchTo(ExecMode::Enclave);
  while (true) {
    const std::uint64_t budget = options.interruptsEnabled ? options.interrupts.sample(rng) : options.fuel;
    std::uint64_t retired = 0;
    while (!ex.halted() && retired < budget) {
      if (report.victimInstructions >= options.fuel) {
        report.trace.fuelExhausted = true;
        break;
      }
      StepInfo info = machine.step(ex);
      report.trace.steps.push_back(info.step);
      report.victimCycles += info.cycles;
      if (info.penalty > 0) ++report.mispredictions;
      ++report.victimInstructions;
      ++retired;
    }
    const bool done = ex.halted() || report.trace.fuelExhausted;
    report.windows.push_back(retired);

    // AEX (or EEXIT when done), probe, then ERESUME.
    machine.switchTo(ExecMode::Attacker);
    if (callback) {
      WindowInfo w{report.windows.size() - 1, retired, ex.halted()};
      try {
        auto rows = callback(machine, w);
        for (auto& r : rows) {
          r.runId = options.runId;
          r.interruptIdx = w.index;
          report.transcript.push_back(std::move(r));
        }
      } catch (const InconsistencyError&) {
        throw;
      } catch (const Error& e) {
        throw Error("probe callback failed at interrupt " + std::to_string(w.index) + ": " + e.what());
      }
    }
    if (done) break;
    machine.switchTo(ExecMode::Enclave);
  }

  report.trace.halted = ex.halted();
  report.trace.registers = ex.registers();
  report.totalCycles = machine.clock() - startClock;
  report.ipcProxy = report.victimCycles == 0
                        ? 0.0
                        : static_cast<double>(report.victimInstructions) / static_cast<double>(report.victimCycles);
  return report;
}

CycleAccount cycleAccount(const ir::Program& program, const ir::ArchTrace& trace,
                          const std::vector<std::uint32_t>& penalties) {
  CycleAccount out;
  for (const auto& s : trace.steps) {
    out.cycles += ir::instructionCost(program.at(*program.indexOf(s.addr)));
  }
  for (auto p : penalties) out.cycles += p;
  out.ipcProxy = out.cycles == 0 ? 0.0 : static_cast<double>(trace.steps.size()) / static_cast<double>(out.cycles);
  return out;
}

std::string RunReport::toJson() const {
  nlohmann::json j;
  j["halted"] = trace.halted;
  j["fuel_exhausted"] = trace.fuelExhausted;
  j["victim_instructions"] = victimInstructions;
  j["victim_cycles"] = victimCycles;
  j["total_cycles"] = totalCycles;
  j["mispredictions"] = mispredictions;
  j["ipc_proxy"] = ipcProxy;
  j["windows"] = windows;
  auto& branches = j["branch_trace"] = nlohmann::json::array();
  for (const auto& s : trace.steps) {
    if (!s.branch) continue;
    branches.push_back({{"addr", toHex(s.addr)}, {"taken", s.branch->taken}, {"next", toHex(s.branch->target)}});
  }
  auto& rows = j["transcript"] = nlohmann::json::array();
  for (const auto& r : transcript) {
    rows.push_back({{"run_id", r.runId},
                    {"interrupt_idx", r.interruptIdx},
                    {"probe_kind", r.probeKind},
                    {"target_addr", toHex(r.targetAddr)},
                    {"observation", r.observation},
                    {"inference", r.inference}});
  }
  return j.dump(2);
}

std::string RunReport::transcriptCsv() const {
  std::ostringstream out;
  out << "run_id,interrupt_idx,probe_kind,target_addr,observation,inference\n";
  for (const auto& r : transcript) {
    out << r.runId << ',' << r.interruptIdx << ',' << r.probeKind << ',' << toHex(r.targetAddr) << ','
        << r.observation << ',' << r.inference << '\n';
  }
  return out.str();
}

}  // namespace bshadow::harness
