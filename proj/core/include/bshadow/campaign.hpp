#pragma once

// Experiment configuration and the batch drivers behind the command line.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bshadow/attacker.hpp"
#include "bshadow/harness.hpp"
#include "bshadow/victims.hpp"

namespace bshadow::campaign {

inline constexpr const char* kSeedEnv = "BSHADOW_SEED";

struct ExperimentConfig {
  std::string victim = "modexp";
  attacker::ProbeChannel channel = attacker::ProbeChannel::LbrFlag;
  uarch::PredictorMode predictor = uarch::PredictorMode::BtbOnly;
  std::string interrupts = "cache-disabled";
  harness::FlushPolicy flush;
  std::uint64_t trials = 100;
  std::optional<std::uint64_t> seed;
  bool zigzagger = false;
  std::optional<std::uint32_t> zigzagK;  // nullopt: all branches in one trampoline
  int repeats = 25;                      // majority vote for timing channels
  unsigned workers = 0;                  // 0: hardware concurrency

  // key=value; unknown keys and bad values raise ConfigError.
  void set(const std::string& key, const std::string& value);
  static ExperimentConfig parse(const std::string& text);
  // Falls back to the environment seed; ConfigError when still unset.
  std::uint64_t requireSeed() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string header() const;  // "# key=value" lines
};

struct TrialResult {
  std::uint64_t trial = 0;
  victims::Leak truth;
  victims::Leak recovered;
  bool match = false;
  bool inconsistent = false;
  std::string diagnostic;
  // Probe scoring against the architectural state of each window.
  std::uint64_t probes = 0;
  std::uint64_t probesCorrect = 0;
  std::uint64_t condTaken = 0, condTakenCorrect = 0;
  std::uint64_t condNotTaken = 0, condNotTakenCorrect = 0;
  double ipcProxy = 0;        // victim under attack
  double benignIpcProxy = 0;  // same input, no attacker, same flush policy
  std::uint64_t windows = 0;
};

struct CampaignReport {
  ExperimentConfig config;
  std::vector<TrialResult> trials;
  double secretAccuracy = 0;
  double probeAccuracy = 0;
  double conditionalTakenAccuracy = 0;
  double conditionalNotTakenAccuracy = 0;
  // Mean of the two conditional class accuracies.
  double branchAccuracy = 0;
  double meanIpcProxy = 0;
  double meanBenignIpcProxy = 0;
  std::uint64_t inconsistentTrials = 0;
  std::uint64_t conditionalProbes = 0;

  std::string toJson() const;
  // One JSON object per line per secret: victim, secret_name,
  // recovered_value, ground_truth, match.
  std::string secretsJsonLines() const;
};

CampaignReport runAttack(const ExperimentConfig& config);

struct SweepRow {
  std::uint64_t period = 0;
  double attackAccuracy = 0;
  double meanIpcProxy = 0;  // benign runs
};

std::vector<SweepRow> sweepFlush(const ExperimentConfig& config, const std::vector<std::uint64_t>& periods);
std::string sweepCsv(const ExperimentConfig& config, const std::vector<SweepRow>& rows);

struct TimingRow {
  uarch::TimingChannel channel{};
  bool mispredict = false;
  double mean = 0;
  double sigma = 0;
  double refMean = 0;
  double refSigma = 0;
  bool degenerate = false;
};

std::vector<TimingRow> timingTable(std::uint64_t samples, std::uint64_t seed);
std::string timingCsv(const std::vector<TimingRow>& rows, std::uint64_t samples, std::uint64_t seed);

struct ZigzagOutput {
  std::string program;
  std::string reportJson;
};

ZigzagOutput zigzag(const std::string& irText, std::optional<std::uint32_t> k, std::uint64_t seed);

struct SingleRun {
  harness::RunReport run;
  victims::Leak truth;
  std::optional<victims::Leak> recovered;
  std::string diagnostic;
};

// One instrumented attack run on the first trial input.
SingleRun reportRun(const ExperimentConfig& config);
std::string singleRunJson(const ExperimentConfig& config, const SingleRun& r);

// File name -> contents: per victim an .ir image and a ground-truth JSON.
std::map<std::string, std::string> corpusFiles(std::uint64_t seed, std::size_t samples);

// Program actually attacked for `config` (zigzag-transformed when enabled).
ir::Program attackedProgram(const victims::VictimSpec& spec, const ExperimentConfig& config);
std::uint64_t trialSeed(std::uint64_t seed, std::uint64_t trial);

}  // namespace bshadow::campaign
