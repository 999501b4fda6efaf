#include "bshadow/uarch.hpp"

#include <algorithm>

namespace bshadow::uarch {

Btb::Btb(BtbConfig config) : config_(config) {
  if (config_.ways == 0 || config_.sets == 0 || (config_.sets & (config_.sets - 1)) != 0) {
    throw ConfigError("BTB needs non-zero ways and a power-of-two set count");
  }
  entries_.resize(static_cast<std::size_t>(config_.ways) * config_.sets);
}

Btb::Entry* Btb::find(VirtualAddress addr) {
  return const_cast<Entry*>(std::as_const(*this).find(addr));
}

const Btb::Entry* Btb::find(VirtualAddress addr) const {
  const std::size_t base = static_cast<std::size_t>(config_.index(addr)) * config_.ways;
  const std::uint32_t tag = BtbConfig::tag(addr);
  for (std::size_t w = 0; w < config_.ways; ++w) {
    const Entry& e = entries_[base + w];
    if (e.valid && e.tag == tag) return &e;
  }
  return nullptr;
}

std::optional<VirtualAddress> Btb::lookup(VirtualAddress addr) {
  Entry* e = find(addr);
  if (!e) return std::nullopt;
  e->stamp = ++clock_;
  return addr + e->displacement;
}

std::optional<VirtualAddress> Btb::peek(VirtualAddress addr) const {
  const Entry* e = find(addr);
  if (!e) return std::nullopt;
  return addr + e->displacement;
}

void Btb::insert(VirtualAddress addr, VirtualAddress target) {
  Entry* e = find(addr);
  if (!e) {
    const std::size_t base = static_cast<std::size_t>(config_.index(addr)) * config_.ways;
    Entry* victim = &entries_[base];
    for (std::size_t w = 0; w < config_.ways; ++w) {
      Entry& cand = entries_[base + w];
      if (!cand.valid) {
        victim = &cand;
        break;
      }
      if (cand.stamp < victim->stamp) victim = &cand;
    }
    e = victim;
  }
  e->valid = true;
  e->tag = BtbConfig::tag(addr);
  e->displacement = target - addr;
  e->stamp = ++clock_;
}

void Btb::invalidate(VirtualAddress addr) {
  if (Entry* e = find(addr)) *e = Entry{};
}

void Btb::flush() {
  std::fill(entries_.begin(), entries_.end(), Entry{});
  clock_ = 0;
}

std::size_t Btb::validEntries() const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [](const Entry& e) { return e.valid; }));
}

std::size_t Btb::validInSet(std::uint32_t set) const {
  const std::size_t base = static_cast<std::size_t>(set) * config_.ways;
  return static_cast<std::size_t>(std::count_if(entries_.begin() + static_cast<std::ptrdiff_t>(base),
                                                entries_.begin() + static_cast<std::ptrdiff_t>(base + config_.ways),
                                                [](const Entry& e) { return e.valid; }));
}

Gshare::Gshare() : pht_(kTableSize, 1) {}

void Gshare::train(VirtualAddress addr, bool taken) {
  std::uint8_t& c = pht_[index(addr)];
  if (taken && c < 3) ++c;
  if (!taken && c > 0) --c;
  history_ = static_cast<std::uint16_t>((history_ << 1) | (taken ? 1 : 0));
}

void Gshare::flush() {
  history_ = 0;
  std::fill(pht_.begin(), pht_.end(), std::uint8_t{1});
}

std::string_view toString(PredictorMode mode) {
  return mode == PredictorMode::Gshare ? "gshare" : "btb-only";
}

PredictorMode parsePredictorMode(std::string_view s) {
  if (s == "btb-only" || s == "btb") return PredictorMode::BtbOnly;
  if (s == "gshare") return PredictorMode::Gshare;
  throw ConfigError("unknown predictor mode '" + std::string(s) + "'");
}

PredictionResult predictBranch(UarchState& state, BranchKind kind, VirtualAddress addr,
                               std::optional<VirtualAddress> staticTarget, VirtualAddress next) {
  PredictionResult r;
  const auto stored = state.btb.lookup(addr);
  switch (kind) {
    case BranchKind::Conditional:
      if (state.mode == PredictorMode::Gshare) {
        r.predictedTaken = state.gshare.predictTaken(addr);
        if (r.predictedTaken) r.predictedTarget = stored ? *stored : staticTarget.value_or(next);
      } else {
        r.predictedTaken = stored.has_value();
        if (stored) r.predictedTarget = *stored;
      }
      break;
    case BranchKind::Unconditional:
      r.predictedTaken = true;
      r.predictedTarget = stored ? *stored : staticTarget.value_or(next);
      break;
    case BranchKind::Indirect:
      r.predictedTaken = true;
      r.predictedTarget = stored ? *stored : next;
      break;
  }
  return r;
}

std::uint32_t resolveAndTrain(UarchState& state, BranchKind kind, VirtualAddress addr,
                              PredictionResult& p, const Resolved& actual) {
  if (kind == BranchKind::Conditional) {
    if (p.predictedTaken != actual.taken) {
      p.correct = false;
      p.mispredictKind = MispredictKind::Direction;
    } else if (actual.taken && p.predictedTarget != actual.target) {
      p.correct = false;
      p.mispredictKind = MispredictKind::Target;
    } else {
      p.correct = true;
      p.mispredictKind = MispredictKind::None;
    }
    if (actual.taken) {
      state.btb.insert(addr, actual.target);
    } else {
      state.btb.invalidate(addr);
    }
    if (state.mode == PredictorMode::Gshare) state.gshare.train(addr, actual.taken);
  } else {
    p.correct = p.predictedTarget == actual.target;
    p.mispredictKind = p.correct ? MispredictKind::None : MispredictKind::Target;
    state.btb.insert(addr, actual.target);
  }
  return p.correct ? 0 : state.penalty;
}

void flush(UarchState& state) {
  state.btb.flush();
  state.gshare.flush();
}

void Lbr::append(const LbrRecord& record) {
  records_.push_back(record);
  if (records_.size() > kCapacity) records_.pop_front();
}

std::vector<LbrRecord> Lbr::read(LbrFilter filter) const {
  std::vector<LbrRecord> out;
  out.reserve(records_.size());
  for (const auto& r : records_) {
    if (filter == LbrFilter::All || r.context == ExecMode::Attacker) out.push_back(r);
  }
  return out;
}

}  // namespace bshadow::uarch
