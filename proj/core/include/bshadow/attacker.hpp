#pragma once

// Branch shadowing: aliased shadow code, the probe procedures, timing
// classifiers, set-conflict probing and control-flow reconstruction.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bshadow/harness.hpp"
#include "bshadow/ir.hpp"
#include "bshadow/uarch.hpp"

namespace bshadow::attacker {

enum class ProbeChannel : std::uint8_t { LbrFlag, LbrCycles, PtCyc, Rdtscp };

std::string_view toString(ProbeChannel c);
ProbeChannel parseProbeChannel(std::string_view s);
std::optional<uarch::TimingChannel> timingChannelOf(ProbeChannel c);

enum class Inference : std::uint8_t { Taken, NotTakenOrNotExecuted, Executed, NotExecuted };

std::string_view toString(Inference i);
// Taken / Executed.
inline bool isPositive(Inference i) { return i == Inference::Taken || i == Inference::Executed; }

struct TargetBranch {
  VirtualAddress addr;
  BranchKind kind = BranchKind::Conditional;
  std::optional<VirtualAddress> staticTarget;
};

struct ShadowProbe {
  TargetBranch target;
  ir::Program program;
  VirtualAddress shadowBranch;          // target.addr + 2^31
  std::optional<VirtualAddress> measure;  // extra branch timed after an unconditional shadow
  ProbeChannel channel = ProbeChannel::LbrFlag;
};

// Builds the aliased shadow for one victim branch. The victim image is used
// to keep the shadow clear of it and to place the measurement stub where it
// aliases no victim branch.
ShadowProbe makeShadow(const ir::Program& victim, VirtualAddress branchAddr, ProbeChannel channel);

struct Thresholds {
  // Decision boundary per timing channel, indexed by uarch::TimingChannel.
  double boundary[3] = {0, 0, 0};

  static Thresholds derive(const uarch::TimingChannelModel& model, double priorMispredict = 0.5);
  // Derived from the reference timing parameters with equal priors.
  static const Thresholds& reference();
  double operator[](uarch::TimingChannel c) const { return boundary[static_cast<int>(c)]; }
};

// Point between the class means where the weighted class densities cross.
double deriveThreshold(const uarch::ChannelParams& p, double priorMispredict = 0.5);

struct ProbeOptions {
  int repeats = 1;  // majority vote over replays from the same pre-probe state
  Thresholds thresholds = Thresholds::reference();
};

struct ProbeResult {
  Inference inference = Inference::NotTakenOrNotExecuted;
  double confidence = 1.0;
  int mispredictVotes = 0;
  int repeats = 1;
  std::string observation;  // channel reading of the last repeat
};

ProbeResult probeConditional(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt = {});
ProbeResult probeUnconditional(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt = {});
ProbeResult probeIndirect(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt = {});
// Dispatches on the target kind.
ProbeResult probe(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt = {});

// Re-executes the victim into `machine` (fresh or not) up to the point of
// interest.
using VictimRerunner = std::function<void(harness::Machine&)>;

// Tries each candidate target of the indirect branch at `branchAddr`; returns
// the one the predictor confirms.
std::optional<VirtualAddress> inferIndirectTarget(const ir::Program& victim, VirtualAddress branchAddr,
                                                  const std::vector<VirtualAddress>& candidates,
                                                  const VictimRerunner& rerun,
                                                  uarch::PredictorMode mode = uarch::PredictorMode::BtbOnly);

// Four attacker branches sharing the monitored address's low 16 bits.
struct EvictionSet {
  std::uint32_t set = 0;
  std::vector<ir::Program> programs;
  std::vector<VirtualAddress> branches;
};

EvictionSet makeEvictionSet(VirtualAddress monitored, std::uint32_t ways = 4);
void primeSet(const EvictionSet& es, harness::Machine& machine);
// Re-runs the primed branches; true if any lost its entry.
bool probeSetEviction(const EvictionSet& es, harness::Machine& machine);

struct FunctionProbe {
  std::string name;
  ShadowProbe prologue;
};

std::optional<std::string> locateActiveFunction(const std::vector<FunctionProbe>& functions,
                                                harness::Machine& machine, const ProbeOptions& opt = {});

struct WindowObservation {
  std::uint64_t instructions = 0;
  std::map<VirtualAddress, Inference> branches;
};

struct ReconstructedPath {
  std::vector<ir::TraceStep> steps;
  std::uint64_t statesExplored = 0;
};

// Finds the unique control-flow path of `program` whose per-window branch
// states match the observations. Throws InconsistencyError when no path or
// more than one path fits.
ReconstructedPath reconstructControlFlow(const ir::Program& program,
                                         const std::vector<WindowObservation>& windows,
                                         std::string_view entry = "main");
// Every path consistent with the observations; InconsistencyError when none
// fits or more than `maxPaths` do.
std::vector<ReconstructedPath> reconstructCandidates(const ir::Program& program,
                                                    const std::vector<WindowObservation>& windows,
                                                    std::size_t maxPaths, std::string_view entry = "main");

// What a probe of `kind` should report given the branch's last state within a
// window (architectural ground truth for scoring).
Inference expectedInference(BranchKind kind, const std::vector<ir::TraceStep>& windowSteps, VirtualAddress addr);

}  // namespace bshadow::attacker
