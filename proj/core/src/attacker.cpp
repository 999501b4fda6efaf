#include "bshadow/attacker.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace bshadow::attacker {

namespace {

constexpr std::int64_t kAlias = static_cast<std::int64_t>(kAliasOffset);
constexpr std::int64_t kStride = static_cast<std::int64_t>(kInstructionStride);
constexpr ir::Reg kArmReg = 1;

using Emit = std::function<void(ir::ProgramBuilder&)>;

// Dense image over [lo, hi) with the given instructions placed and halt
// everywhere else.
ir::Program layout(VirtualAddress lo, VirtualAddress hi, const std::map<VirtualAddress, Emit>& placed,
                   VirtualAddress entry) {
  ir::ProgramBuilder b(lo);
  for (VirtualAddress a = lo; a < hi; a = a + kStride) {
    if (auto it = placed.find(a); it != placed.end()) {
      it->second(b);
    } else {
      b.halt();
    }
  }
  b.entry("main", entry);
  return b.build();
}

bool overlaps(VirtualAddress lo, VirtualAddress hi, const ir::Program& p) {
  return lo < p.end() && p.base() < hi;
}

const uarch::LbrRecord& recordFrom(const std::vector<uarch::LbrRecord>& records, VirtualAddress from) {
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->from == from) return *it;
  }
  throw Error("no LBR record for shadow branch " + toHex(from) + " (filtered out or not taken)");
}

std::string formatCycles(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "cycles=%.2f", v);
  return buf;
}

struct Reading {
  bool mispredict = false;
  std::string observation;
};

// Classifies a shadow branch: LBR flag directly, or a timing reading against
// the channel threshold.
// Runs the shadow program and reports whether the shadow branch itself
// mispredicted. The LBR flag hides this for unconditional jumps; a timer
// around the attacker's own code does not.
bool runShadow(const ShadowProbe& probe, harness::Machine& machine, const ir::Input& input = {}) {
  machine.switchTo(ExecMode::Attacker);
  ir::Executor ex(probe.program, input);
  bool mispredicted = false;
  for (std::uint64_t n = 0; !ex.halted(); ++n) {
    if (n >= 100000) throw Error("shadow program did not halt");
    const auto info = machine.step(ex);
    if (info.step.addr == probe.shadowBranch) mispredicted = !info.prediction.correct;
  }
  return mispredicted;
}

Reading classify(const ShadowProbe& probe, harness::Machine& machine, const uarch::LbrRecord& shadowRec,
                 const std::vector<uarch::LbrRecord>& records, const Thresholds& thr, bool timedMispredict) {
  const bool trueMispredict = !shadowRec.predicted;
  const auto tc = timingChannelOf(probe.channel);
  if (!tc) return {trueMispredict, shadowRec.predicted ? "predicted=1" : "predicted=0"};
  double cycles = 0;
  if (*tc == uarch::TimingChannel::LbrCycles && probe.measure) {
    cycles = recordFrom(records, *probe.measure).elapsedCycles;
  } else {
    cycles = machine.timing().sample(*tc, timedMispredict);
  }
  return {cycles > thr[*tc], formatCycles(cycles)};
}

ProbeResult vote(int mispredicts, int repeats, bool positiveOnMispredict, BranchKind kind,
                 std::string observation) {
  ProbeResult r;
  r.mispredictVotes = mispredicts;
  r.repeats = repeats;
  r.observation = std::move(observation);
  const bool majority = 2 * mispredicts > repeats;
  const bool positive = positiveOnMispredict ? majority : !(2 * mispredicts >= repeats);
  if (kind == BranchKind::Conditional) {
    r.inference = positive ? Inference::Taken : Inference::NotTakenOrNotExecuted;
  } else {
    r.inference = positive ? Inference::Executed : Inference::NotExecuted;
  }
  r.confidence = static_cast<double>(std::max(mispredicts, repeats - mispredicts)) / repeats;
  return r;
}

void requireKind(const ShadowProbe& p, BranchKind k) {
  if (p.target.kind != k) {
    throw ConfigError("probe for " + std::string(toString(p.target.kind)) + " branch used as " +
                      std::string(toString(k)));
  }
}

}  // namespace

std::string_view toString(ProbeChannel c) {
  switch (c) {
    case ProbeChannel::LbrFlag: return "lbr-flag";
    case ProbeChannel::LbrCycles: return "lbr-cycles";
    case ProbeChannel::PtCyc: return "pt-cyc";
    case ProbeChannel::Rdtscp: return "rdtscp";
  }
  return "?";
}

ProbeChannel parseProbeChannel(std::string_view s) {
  if (s == "lbr-flag") return ProbeChannel::LbrFlag;
  if (s == "lbr-cycles") return ProbeChannel::LbrCycles;
  if (s == "pt-cyc") return ProbeChannel::PtCyc;
  if (s == "rdtscp") return ProbeChannel::Rdtscp;
  throw ConfigError("unknown channel '" + std::string(s) + "'");
}

std::optional<uarch::TimingChannel> timingChannelOf(ProbeChannel c) {
  switch (c) {
    case ProbeChannel::LbrFlag: return std::nullopt;
    case ProbeChannel::LbrCycles: return uarch::TimingChannel::LbrCycles;
    case ProbeChannel::PtCyc: return uarch::TimingChannel::PtCyc;
    case ProbeChannel::Rdtscp: return uarch::TimingChannel::Rdtscp;
  }
  return std::nullopt;
}

std::string_view toString(Inference i) {
  switch (i) {
    case Inference::Taken: return "taken";
    case Inference::NotTakenOrNotExecuted: return "not-taken-or-not-executed";
    case Inference::Executed: return "executed";
    case Inference::NotExecuted: return "not-executed";
  }
  return "?";
}

ShadowProbe makeShadow(const ir::Program& victim, VirtualAddress branchAddr, ProbeChannel channel) {
  const auto site = victim.branchAt(branchAddr);
  if (!site) throw ConfigError("no branch at " + toHex(branchAddr) + " in victim image");

  ShadowProbe p;
  p.target = {site->addr, site->kind, site->staticTarget};
  p.channel = channel;
  const VirtualAddress a = site->addr + kAlias;
  p.shadowBranch = a;
  std::map<VirtualAddress, Emit> placed;
  VirtualAddress lo = a;
  VirtualAddress hi = a + 2 * kStride;
  VirtualAddress entry = a;

  switch (site->kind) {
    case BranchKind::Conditional: {
      const VirtualAddress t = *site->staticTarget + kAlias;
      const VirtualAddress e = a - kStride;
      if (t == a) throw ConfigError("conditional at " + toHex(branchAddr) + " targets itself");
      if (t == e) throw ConfigError("conditional at " + toHex(branchAddr) + " targets its own predecessor");
      placed[e] = [](ir::ProgramBuilder& b) { b.input(kArmReg, "arm"); };
      placed[a] = [t](ir::ProgramBuilder& b) { b.br(kArmReg, t); };
      lo = std::min(e, t);
      hi = std::max(hi, t + kStride);
      entry = e;
      break;
    }
    case BranchKind::Unconditional: {
      // Stub lies past the aliased image; its own entry must not share a
      // (set, tag) with any victim branch.
      const uarch::BtbConfig cfg;
      VirtualAddress stub = victim.end() + kAlias + 16 * kStride;
      const auto clashes = [&](VirtualAddress s) {
        for (const auto& br : victim.branches()) {
          if (cfg.index(br.addr) == cfg.index(s) && cfg.tag(br.addr) == cfg.tag(s)) return true;
        }
        return false;
      };
      while (clashes(stub)) stub = stub + kStride;
      placed[a] = [stub](ir::ProgramBuilder& b) { b.jmp(stub); };
      placed[stub] = [stub](ir::ProgramBuilder& b) { b.jmp(stub + kStride); };
      p.measure = stub;
      hi = stub + 2 * kStride;
      break;
    }
    case BranchKind::Indirect: {
      const VirtualAddress e = a - kStride;
      const VirtualAddress next = a + kStride;
      placed[e] = [next](ir::ProgramBuilder& b) { b.mov(kArmReg, ir::Operand::addr(next)); };
      placed[a] = [](ir::ProgramBuilder& b) { b.ijmp(kArmReg); };
      lo = e;
      entry = e;
      break;
    }
  }
  if (overlaps(lo, hi, victim)) {
    throw ConfigError("shadow image [" + toHex(lo) + ", " + toHex(hi) + ") collides with the victim image");
  }
  p.program = layout(lo, hi, placed, entry);
  return p;
}

double deriveThreshold(const uarch::ChannelParams& p, double priorMispredict) {
  if (priorMispredict <= 0 || priorMispredict >= 1) throw ConfigError("prior must lie in (0, 1)");
  const double m0 = p.meanCorrect, s0 = p.sigmaCorrect;
  const double m1 = p.meanMispredict, s1 = p.sigmaMispredict;
  if (m0 == m1) throw ConfigError("degenerate channel: equal class means");
  if (s0 <= 0 || s1 <= 0) return 0.5 * (m0 + m1);
  const double a = 1.0 / (2 * s1 * s1) - 1.0 / (2 * s0 * s0);
  const double b = m0 / (s0 * s0) - m1 / (s1 * s1);
  const double c = m1 * m1 / (2 * s1 * s1) - m0 * m0 / (2 * s0 * s0) + std::log(s1 / s0) +
                   std::log((1 - priorMispredict) / priorMispredict);
  if (std::abs(a) < 1e-15) return -c / b;
  const double disc = b * b - 4 * a * c;
  if (disc < 0) throw ConfigError("class densities never cross");
  const double r1 = (-b - std::sqrt(disc)) / (2 * a);
  const double r2 = (-b + std::sqrt(disc)) / (2 * a);
  const double lo = std::min(r1, r2), hi = std::max(r1, r2);
  // Boundary on the mispredict side of the correct-class mean.
  if (m1 > m0) return lo > m0 ? lo : hi;
  return hi < m0 ? hi : lo;
}

Thresholds Thresholds::derive(const uarch::TimingChannelModel& model, double priorMispredict) {
  Thresholds t;
  for (auto c : {uarch::TimingChannel::Rdtscp, uarch::TimingChannel::PtCyc, uarch::TimingChannel::LbrCycles}) {
    t.boundary[static_cast<int>(c)] = deriveThreshold(model.params(c), priorMispredict);
  }
  return t;
}

const Thresholds& Thresholds::reference() {
  static const Thresholds t = derive(uarch::TimingChannelModel(0));
  return t;
}

ProbeResult probeConditional(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt) {
  requireKind(probe, BranchKind::Conditional);
  if (opt.repeats < 1) throw ConfigError("repeats must be >= 1");
  const ir::Input armed = ir::Input().set("arm", 1);
  const ir::Input disarmed = ir::Input().set("arm", 0);
  const harness::Snapshot snap = machine.snapshot();
  int votes = 0;
  std::string obs;
  for (int r = 0; r < opt.repeats; ++r) {
    if (r > 0) machine.restore(snap);
    machine.lbr().clear();
    const bool timed = runShadow(probe, machine, armed);
    const auto records = machine.lbr().read();
    const auto reading =
        classify(probe, machine, recordFrom(records, probe.shadowBranch), records, opt.thresholds, timed);
    votes += reading.mispredict ? 1 : 0;
    obs = reading.observation;
    // Not-taken pass drops the entry the armed pass installed.
    machine.runAttacker(probe.program, disarmed);
  }
  return vote(votes, opt.repeats, false, BranchKind::Conditional, obs);
}

ProbeResult probeUnconditional(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt) {
  requireKind(probe, BranchKind::Unconditional);
  if (opt.repeats < 1) throw ConfigError("repeats must be >= 1");
  const harness::Snapshot snap = machine.snapshot();
  int votes = 0;
  std::string obs;
  for (int r = 0; r < opt.repeats; ++r) {
    if (r > 0) machine.restore(snap);
    machine.lbr().clear();
    const bool timed = runShadow(probe, machine);
    const auto records = machine.lbr().read();
    const auto reading =
        classify(probe, machine, recordFrom(records, probe.shadowBranch), records, opt.thresholds, timed);
    votes += reading.mispredict ? 1 : 0;
    obs = reading.observation;
  }
  return vote(votes, opt.repeats, true, BranchKind::Unconditional, obs);
}

ProbeResult probeIndirect(const ShadowProbe& probe, harness::Machine& machine, const ProbeOptions& opt) {
  requireKind(probe, BranchKind::Indirect);
  if (opt.repeats < 1) throw ConfigError("repeats must be >= 1");
  const harness::Snapshot snap = machine.snapshot();
  int votes = 0;
  std::string obs;
  for (int r = 0; r < opt.repeats; ++r) {
    if (r > 0) machine.restore(snap);
    machine.lbr().clear();
    const bool timed = runShadow(probe, machine);
    const auto records = machine.lbr().read();
    const auto reading =
        classify(probe, machine, recordFrom(records, probe.shadowBranch), records, opt.thresholds, timed);
    votes += reading.mispredict ? 1 : 0;
    obs = reading.observation;
  }
  return vote(votes, opt.repeats, true, BranchKind::Indirect, obs);
}

ProbeResult probe(const ShadowProbe& p, harness::Machine& machine, const ProbeOptions& opt) {
  switch (p.target.kind) {
    case BranchKind::Conditional: return probeConditional(p, machine, opt);
    case BranchKind::Unconditional: return probeUnconditional(p, machine, opt);
    case BranchKind::Indirect: return probeIndirect(p, machine, opt);
  }
  throw ConfigError("unknown branch kind");
}

std::optional<VirtualAddress> inferIndirectTarget(const ir::Program& victim, VirtualAddress branchAddr,
                                                  const std::vector<VirtualAddress>& candidates,
                                                  const VictimRerunner& rerun, uarch::PredictorMode mode) {
  const auto site = victim.branchAt(branchAddr);
  if (!site || site->kind != BranchKind::Indirect) {
    throw ConfigError("no indirect branch at " + toHex(branchAddr));
  }
  const VirtualAddress a = branchAddr + kAlias;
  const VirtualAddress lo = std::min(victim.base() + kAlias, a - kStride);
  const VirtualAddress hi = victim.end() + kAlias + kStride;
  for (const VirtualAddress c : candidates) {
    if (!victim.contains(c)) continue;
    const VirtualAddress shadowTarget = c + kAlias;
    std::map<VirtualAddress, Emit> placed;
    placed[a - kStride] = [shadowTarget](ir::ProgramBuilder& b) { b.mov(kArmReg, ir::Operand::addr(shadowTarget)); };
    placed[a] = [](ir::ProgramBuilder& b) { b.ijmp(kArmReg); };
    const ir::Program shadow = layout(lo, hi, placed, a - kStride);

    harness::Machine machine(mode);
    rerun(machine);
    machine.lbr().clear();
    machine.runAttacker(shadow);
    const auto records = machine.lbr().read();
    if (recordFrom(records, a).predicted) return c;
  }
  return std::nullopt;
}

EvictionSet makeEvictionSet(VirtualAddress monitored, std::uint32_t ways) {
  const uarch::BtbConfig cfg;
  EvictionSet es;
  es.set = cfg.index(monitored);
  const std::uint64_t low = monitored.value & 0xFFFF;
  const std::uint32_t avoid = uarch::BtbConfig::tag(monitored);
  for (std::uint64_t t = 0x7FF0; es.branches.size() < ways; --t) {
    if (t == avoid) continue;
    const VirtualAddress br((t << 16) | low);
    ir::ProgramBuilder b(br - kStride);
    b.mov(kArmReg, ir::Operand::imm(1)).br(kArmReg, "out").label("out").halt();
    es.programs.push_back(b.build());
    es.branches.push_back(br);
  }
  return es;
}

void primeSet(const EvictionSet& es, harness::Machine& machine) {
  for (const auto& p : es.programs) machine.runAttacker(p);
}

bool probeSetEviction(const EvictionSet& es, harness::Machine& machine) {
  bool evicted = false;
  for (std::size_t i = 0; i < es.programs.size(); ++i) {
    machine.lbr().clear();
    machine.runAttacker(es.programs[i]);
    if (!recordFrom(machine.lbr().read(), es.branches[i]).predicted) evicted = true;
  }
  return evicted;
}

std::optional<std::string> locateActiveFunction(const std::vector<FunctionProbe>& functions,
                                                harness::Machine& machine, const ProbeOptions& opt) {
  std::optional<std::string> found;
  int hits = 0;
  for (const auto& f : functions) {
    if (isPositive(probe(f.prologue, machine, opt).inference)) {
      ++hits;
      found = f.name;
    }
  }
  if (hits != 1) return std::nullopt;
  return found;
}

Inference expectedInference(BranchKind kind, const std::vector<ir::TraceStep>& windowSteps, VirtualAddress addr) {
  const ir::TraceStep* last = nullptr;
  for (const auto& s : windowSteps) {
    if (s.addr == addr) last = &s;
  }
  switch (kind) {
    case BranchKind::Conditional:
      return last && last->branch && last->branch->taken ? Inference::Taken : Inference::NotTakenOrNotExecuted;
    case BranchKind::Unconditional:
      return last ? Inference::Executed : Inference::NotExecuted;
    case BranchKind::Indirect:
      return last && last->branch && last->branch->target != addr + kStride ? Inference::Executed
                                                                           : Inference::NotExecuted;
  }
  return Inference::NotExecuted;
}

}  // namespace bshadow::attacker
