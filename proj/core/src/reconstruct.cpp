#include <algorithm>
#include <map>
#include <set>

#include "bshadow/attacker.hpp"

namespace bshadow::attacker {

namespace {

constexpr std::uint64_t kWindowPathBudget = std::uint64_t{1} << 15;
constexpr std::uint64_t kPathCap = std::uint64_t{1} << 40;
constexpr std::int64_t kStride = static_cast<std::int64_t>(kInstructionStride);

struct Edge {
  std::size_t parent = 0;  // index into previous layer
  std::vector<ir::TraceStep> segment;
};

struct Boundary {
  std::size_t pc = 0;
  bool halted = false;
  std::vector<Edge> in;
  std::uint64_t paths = 1;  // saturating count of distinct histories

  auto key() const { return std::pair{halted, pc}; }
};

struct Conflict {
  std::uint64_t window = 0;
  VirtualAddress addr;
  Inference observed{};
  Inference expected{};
};

class WindowSearch {
 public:
  WindowSearch(const ir::Program& program, const WindowObservation& obs, bool last,
               const std::vector<VirtualAddress>& indirectTargets)
      : program_(program), obs_(obs), last_(last), indirectTargets_(indirectTargets) {}

  // Enumerates every segment of exactly obs.instructions steps from `pc`
  // that matches the window's observations.
  void run(std::size_t pc, std::vector<std::pair<Boundary, std::vector<ir::TraceStep>>>& out) {
    out_ = &out;
    segment_.clear();
    explored_ = 0;
    walk(pc);
  }

  std::uint64_t explored() const { return explored_; }
  const std::optional<Conflict>& firstConflict() const { return conflict_; }

 private:
  void emit(std::size_t pc, bool halted) {
    for (const auto& [addr, observed] : obs_.branches) {
      const auto site = program_.branchAt(addr);
      if (!site) throw ConfigError("observation for non-branch address " + toHex(addr));
      const Inference expected = expectedInference(site->kind, segment_, addr);
      if (expected != observed) {
        if (!conflict_) conflict_ = Conflict{0, addr, observed, expected};
        return;
      }
    }
    Boundary b;
    b.pc = pc;
    b.halted = halted;
    out_->emplace_back(std::move(b), segment_);
  }

  void walk(std::size_t pc) {
    if (++explored_ > kWindowPathBudget) {
      throw InconsistencyError("control-flow search exceeded its per-window path budget");
    }
    if (segment_.size() == obs_.instructions) {
      if (!last_) emit(pc, false);
      return;
    }
    if (pc >= program_.size()) return;
    const VirtualAddress here = program_.addressOf(pc);
    const ir::Instruction& instr = program_.at(pc);

    const auto push = [&](std::optional<ir::BranchOutcome> br, std::size_t next) {
      segment_.push_back({here, br});
      walk(next);
      segment_.pop_back();
    };

    if (std::holds_alternative<ir::Halt>(instr)) {
      if (!last_ || segment_.size() + 1 != obs_.instructions) return;
      segment_.push_back({here, std::nullopt});
      emit(pc, true);
      segment_.pop_back();
    } else if (const auto* b = std::get_if<ir::CondBranch>(&instr)) {
      push(ir::BranchOutcome{true, b->target}, *program_.indexOf(b->target));
      push(ir::BranchOutcome{false, here + kStride}, pc + 1);
    } else if (const auto* j = std::get_if<ir::Jump>(&instr)) {
      push(ir::BranchOutcome{true, j->target}, *program_.indexOf(j->target));
    } else if (std::holds_alternative<ir::IndirectJump>(instr)) {
      for (VirtualAddress t : indirectTargets_) push(ir::BranchOutcome{true, t}, *program_.indexOf(t));
    } else {
      push(std::nullopt, pc + 1);
    }
  }

  const ir::Program& program_;
  const WindowObservation& obs_;
  bool last_;
  const std::vector<VirtualAddress>& indirectTargets_;
  std::vector<std::pair<Boundary, std::vector<ir::TraceStep>>>* out_ = nullptr;
  std::vector<ir::TraceStep> segment_;
  std::uint64_t explored_ = 0;
  std::optional<Conflict> conflict_;
};

}  // namespace

std::vector<ReconstructedPath> reconstructCandidates(const ir::Program& program,
                                                    const std::vector<WindowObservation>& windows,
                                                    std::size_t maxPaths, std::string_view entry) {
  if (windows.empty()) throw InconsistencyError("no observation windows");
  const auto targets = program.addressTakenTargets();
  std::vector<std::vector<Boundary>> layers;
  Boundary start;
  start.pc = *program.indexOf(program.entry(entry));
  layers.push_back({start});
  std::uint64_t explored = 0;

  for (std::size_t w = 0; w < windows.size(); ++w) {
    if (windows[w].instructions == 0) throw InconsistencyError("window " + std::to_string(w) + " is empty");
    const bool last = w + 1 == windows.size();
    WindowSearch search(program, windows[w], last, targets);
    std::map<std::pair<bool, std::size_t>, Boundary> next;
    std::vector<std::pair<Boundary, std::vector<ir::TraceStep>>> found;
    std::optional<Conflict> conflict;
    const auto& layer = layers.back();
    for (std::size_t i = 0; i < layer.size(); ++i) {
      if (layer[i].halted) continue;
      found.clear();
      search.run(layer[i].pc, found);
      explored += search.explored();
      if (!conflict && search.firstConflict()) conflict = search.firstConflict();
      for (auto& [b, seg] : found) {
        auto [it, fresh] = next.try_emplace(b.key(), b);
        Boundary& dst = it->second;
        if (fresh) dst.paths = 0;
        dst.in.push_back({i, std::move(seg)});
        dst.paths = std::min(dst.paths + layer[i].paths, kPathCap);
      }
    }
    if (next.empty()) {
      std::string msg = "no control-flow path explains window " + std::to_string(w);
      if (conflict) {
        msg += ": branch " + toHex(conflict->addr) + " observed " + std::string(toString(conflict->observed)) +
               " but every candidate path implies " + std::string(toString(conflict->expected));
      }
      throw InconsistencyError(msg);
    }
    std::vector<Boundary> nextLayer;
    for (auto& [k, b] : next) nextLayer.push_back(std::move(b));
    layers.push_back(std::move(nextLayer));
  }

  const auto& finals = layers.back();
  std::uint64_t total = 0;
  for (const auto& b : finals) total = std::min(total + b.paths, kPathCap);
  if (total > maxPaths) {
    throw InconsistencyError(maxPaths == 1 ? std::string("observations admit more than one control-flow path")
                                           : "observations admit more than " + std::to_string(maxPaths) +
                                                 " control-flow paths");
  }
  std::vector<ReconstructedPath> out;
  // Walk every history backwards, concatenating segments.
  const auto expand = [&](auto&& self, std::size_t layer, std::size_t idx,
                          std::vector<const std::vector<ir::TraceStep>*>& segs) -> void {
    if (layer == 0) {
      ReconstructedPath p;
      p.statesExplored = explored;
      for (auto it = segs.rbegin(); it != segs.rend(); ++it) p.steps.insert(p.steps.end(), (*it)->begin(), (*it)->end());
      out.push_back(std::move(p));
      return;
    }
    for (const auto& e : layers[layer][idx].in) {
      segs.push_back(&e.segment);
      self(self, layer - 1, e.parent, segs);
      segs.pop_back();
    }
  };
  std::vector<const std::vector<ir::TraceStep>*> segs;
  for (std::size_t i = 0; i < finals.size(); ++i) expand(expand, layers.size() - 1, i, segs);
  return out;
}

ReconstructedPath reconstructControlFlow(const ir::Program& program, const std::vector<WindowObservation>& windows,
                                         std::string_view entry) {
  auto paths = reconstructCandidates(program, windows, 1, entry);
  return std::move(paths.front());
}

}  // namespace bshadow::attacker
