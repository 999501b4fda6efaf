#pragma once

// Shared branch-prediction state: BTB, direction predictor, LBR and the
// timing channels used to observe mispredictions.

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "bshadow/common.hpp"

namespace bshadow::uarch {

struct BtbConfig {
  std::uint32_t ways = 4;
  std::uint32_t sets = 1024;  // power of two

  // bits[9:0] ^ bits[15:6]
  std::uint32_t index(VirtualAddress addr) const {
    const std::uint64_t low = addr.value & 0xFFFF;
    return static_cast<std::uint32_t>((low ^ (low >> 6)) & (sets - 1));
  }
  // bits[30:16]
  static std::uint32_t tag(VirtualAddress addr) {
    return static_cast<std::uint32_t>((addr.value >> 16) & 0x7FFF);
  }

  friend bool operator==(const BtbConfig&, const BtbConfig&) = default;
};

// Entries hold the branch displacement, so a hit from an aliased address
// yields a target shifted by the same amount.
class Btb {
 public:
  explicit Btb(BtbConfig config = {});

  const BtbConfig& config() const { return config_; }

  // Refreshes LRU on hit.
  std::optional<VirtualAddress> lookup(VirtualAddress addr);
  // Same as lookup without touching replacement state.
  std::optional<VirtualAddress> peek(VirtualAddress addr) const;
  void insert(VirtualAddress addr, VirtualAddress target);
  void invalidate(VirtualAddress addr);
  void flush();

  std::size_t validEntries() const;
  std::size_t validInSet(std::uint32_t set) const;

  friend bool operator==(const Btb&, const Btb&) = default;

 private:
  struct Entry {
    std::uint32_t tag = 0;
    std::int64_t displacement = 0;
    bool valid = false;
    std::uint64_t stamp = 0;  // last touch; larger is more recent

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  Entry* find(VirtualAddress addr);
  const Entry* find(VirtualAddress addr) const;

  BtbConfig config_;
  std::vector<Entry> entries_;  // sets * ways
  std::uint64_t clock_ = 0;
};

class Gshare {
 public:
  static constexpr int kHistoryBits = 16;
  static constexpr std::size_t kTableSize = std::size_t{1} << kHistoryBits;

  Gshare();

  std::uint32_t index(VirtualAddress addr) const {
    return static_cast<std::uint32_t>((history_ ^ (addr.value >> 2)) & (kTableSize - 1));
  }
  bool predictTaken(VirtualAddress addr) const { return pht_[index(addr)] >= 2; }
  void train(VirtualAddress addr, bool taken);
  void flush();

  std::uint16_t history() const { return history_; }
  std::uint8_t counter(std::uint32_t i) const { return pht_[i]; }

  friend bool operator==(const Gshare&, const Gshare&) = default;

 private:
  std::uint16_t history_ = 0;
  std::vector<std::uint8_t> pht_;
};

enum class PredictorMode : std::uint8_t { BtbOnly, Gshare };

std::string_view toString(PredictorMode mode);
PredictorMode parsePredictorMode(std::string_view s);

inline constexpr std::uint32_t kDefaultPenalty = 20;

struct UarchState {
  Btb btb;
  Gshare gshare;
  PredictorMode mode = PredictorMode::BtbOnly;
  std::uint32_t penalty = kDefaultPenalty;

  explicit UarchState(PredictorMode m = PredictorMode::BtbOnly, BtbConfig cfg = {})
      : btb(cfg), mode(m) {}

  friend bool operator==(const UarchState&, const UarchState&) = default;
};

enum class MispredictKind : std::uint8_t { None, Direction, Target };

struct PredictionResult {
  bool predictedTaken = false;
  std::optional<VirtualAddress> predictedTarget;
  bool correct = true;
  MispredictKind mispredictKind = MispredictKind::None;
};

struct Resolved {
  bool taken = false;
  VirtualAddress target;  // next address actually executed
};

// `next` is the fall-through address; `staticTarget` is absent for indirect.
PredictionResult predictBranch(UarchState& state, BranchKind kind, VirtualAddress addr,
                               std::optional<VirtualAddress> staticTarget, VirtualAddress next);

// Fills in correctness, trains the predictors and returns the penalty.
std::uint32_t resolveAndTrain(UarchState& state, BranchKind kind, VirtualAddress addr,
                              PredictionResult& prediction, const Resolved& actual);

void flush(UarchState& state);

struct LbrRecord {
  VirtualAddress from;
  VirtualAddress to;
  bool predicted = true;
  double elapsedCycles = 0;
  ExecMode context = ExecMode::Attacker;
};

enum class LbrFilter : std::uint8_t { AttackerOnly, All };

class Lbr {
 public:
  static constexpr std::size_t kCapacity = 32;

  void append(const LbrRecord& record);
  std::vector<LbrRecord> read(LbrFilter filter = LbrFilter::AttackerOnly) const;
  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

 private:
  std::deque<LbrRecord> records_;
};

enum class TimingChannel : std::uint8_t { Rdtscp, PtCyc, LbrCycles };

std::string_view toString(TimingChannel c);

struct ChannelParams {
  double meanCorrect = 0;
  double sigmaCorrect = 0;
  double meanMispredict = 0;
  double sigmaMispredict = 0;
};

ChannelParams defaultChannelParams(TimingChannel c);

// Per-channel noise. Each class is a Gaussian clamped to >= 1 cycle unless
// clamping would visibly distort it; then a shifted gamma with the same mean
// and sigma is used.
class TimingChannelModel {
 public:
  explicit TimingChannelModel(std::uint64_t seed);

  const ChannelParams& params(TimingChannel c) const;
  void setParams(TimingChannel c, ChannelParams p);

  double sample(TimingChannel c, bool mispredict);
  // Independent stream for the same parameters.
  TimingChannelModel fork(std::uint64_t salt) const;

  static bool usesGamma(double mean, double sigma);

 private:
  double draw(double mean, double sigma);

  std::uint64_t seed_;
  ChannelParams params_[3];
  std::mt19937_64 rng_;
};

}  // namespace bshadow::uarch
