#pragma once

// Enclave/attacker execution on a shared predictor, interrupt scheduling,
// flush policies and cycle accounting.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bshadow/ir.hpp"
#include "bshadow/uarch.hpp"

namespace bshadow::harness {

// Window lengths in victim instructions between consecutive interrupts.
struct InterruptModel {
  double meanInstrsPerWindow = 48.76;
  double sigma = 2.75;

  static InterruptModel normal() { return {48.76, 2.75}; }
  static InterruptModel cacheDisabled() { return {4.71, 1.96}; }
  static InterruptModel parse(std::string_view s);

  // Rounded Gaussian, at least one instruction.
  std::uint64_t sample(std::mt19937_64& rng) const;
};

struct FlushPolicy {
  enum class Kind : std::uint8_t { None, OnEnclaveSwitch, Periodic };
  Kind kind = Kind::None;
  std::uint64_t periodCycles = 0;

  static FlushPolicy none() { return {}; }
  static FlushPolicy onEnclaveSwitch() { return {Kind::OnEnclaveSwitch, 0}; }
  static FlushPolicy periodic(std::uint64_t period);
  // "none" | "on-switch" | "periodic:N"
  static FlushPolicy parse(std::string_view s);
  std::string toString() const;
};

struct StepInfo {
  ir::TraceStep step;
  std::optional<BranchKind> kind;
  uarch::PredictionResult prediction;
  std::uint64_t cycles = 0;  // cost + penalty
  std::uint32_t penalty = 0;
};

// Saved predictor state, used to replay a probe from identical conditions.
struct Snapshot {
  uarch::UarchState state;
  std::uint64_t nextFlush = 0;
};

// One core: predictor state, LBR, timing channels and a global cycle clock.
class Machine {
 public:
  explicit Machine(uarch::PredictorMode mode = uarch::PredictorMode::BtbOnly,
                   std::uint64_t timingSeed = 1, std::uint32_t penalty = uarch::kDefaultPenalty);

  uarch::UarchState& uarch() { return state_; }
  const uarch::UarchState& uarch() const { return state_; }
  uarch::Lbr& lbr() { return lbr_; }
  uarch::TimingChannelModel& timing() { return timing_; }

  std::uint64_t clock() const { return clock_; }
  std::uint64_t flushCount() const { return flushes_; }
  ExecMode mode() const { return mode_; }

  void setFlushPolicy(FlushPolicy policy);
  const FlushPolicy& flushPolicy() const { return policy_; }

  void switchTo(ExecMode mode);
  void flush();

  // Executes one instruction of `ex` in the current mode.
  StepInfo step(ir::Executor& ex);

  // Runs an attacker program to completion in attacker mode.
  ir::ArchTrace runAttacker(const ir::Program& program, const ir::Input& input = {},
                            std::uint64_t fuel = 100000);

  Snapshot snapshot() const { return {state_, nextFlush_}; }
  void restore(const Snapshot& s);

 private:
  void recordBranch(const StepInfo& info);

  uarch::UarchState state_;
  uarch::Lbr lbr_;
  uarch::TimingChannelModel timing_;
  FlushPolicy policy_;
  ExecMode mode_ = ExecMode::Attacker;
  std::uint64_t clock_ = 0;
  std::uint64_t nextFlush_ = 0;
  std::uint64_t flushes_ = 0;
  bool pendingMispredict_ = false;
};

struct TranscriptRow {
  std::uint64_t runId = 0;
  std::uint64_t interruptIdx = 0;
  std::string probeKind;
  VirtualAddress targetAddr;
  std::string observation;
  std::string inference;
};

struct WindowInfo {
  std::uint64_t index = 0;
  std::uint64_t instructions = 0;  // victim instructions retired in this window
  bool final = false;              // victim halted at the end of this window
};

using ProbeCallback = std::function<std::vector<TranscriptRow>(Machine&, const WindowInfo&)>;

struct RunReport {
  ir::ArchTrace trace;
  std::vector<std::uint64_t> windows;
  std::vector<TranscriptRow> transcript;
  std::uint64_t victimCycles = 0;
  std::uint64_t victimInstructions = 0;
  std::uint64_t totalCycles = 0;
  std::uint64_t mispredictions = 0;
  double ipcProxy = 0;

  std::string toJson() const;
  std::string transcriptCsv() const;
};

struct RunOptions {
  InterruptModel interrupts = InterruptModel::normal();
  FlushPolicy flush = FlushPolicy::none();
  std::uint64_t seed = 1;
  std::uint64_t fuel = 1'000'000;
  std::uint64_t runId = 0;
  // Disable interrupts entirely (one window covering the whole run).
  bool interruptsEnabled = true;
};

// Runs the victim in enclave mode, interrupting it after each sampled window.
// The callback sees the machine in attacker mode after every window,
// including the one that ends with halt.
RunReport runWithInterrupts(Machine& machine, const ir::Program& victim, const ir::Input& input,
                            const RunOptions& options, const ProbeCallback& callback = {});

struct CycleAccount {
  std::uint64_t cycles = 0;
  double ipcProxy = 0;
};

// cycles = sum of instruction costs + sum of penalties.
CycleAccount cycleAccount(const ir::Program& program, const ir::ArchTrace& trace,
                          const std::vector<std::uint32_t>& penalties);

}  // namespace bshadow::harness
