#include "bshadow/campaign.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "bshadow/zigzagger.hpp"

namespace bshadow::campaign {

namespace {

using nlohmann::json;

constexpr std::size_t kMaxCandidatePaths = 64;

std::uint64_t parseU64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parseBool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects on/off, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

json leakJson(const victims::Leak& l) {
  json j = json::object();
  for (const auto& [k, v] : l) j[k] = v;
  return j;
}

std::vector<attacker::ShadowProbe> buildProbes(const ir::Program& program, attacker::ProbeChannel channel) {
  std::vector<attacker::ShadowProbe> out;
  for (const auto& site : program.branches()) {
    // Unconditional branches never mispredict visibly on the flag channel.
    if (channel == attacker::ProbeChannel::LbrFlag && site.kind == BranchKind::Unconditional) continue;
    out.push_back(attacker::makeShadow(program, site.addr, channel));
  }
  return out;
}

struct TrialContext {
  const victims::VictimSpec* spec;
  const ir::Program* program;
  const std::vector<attacker::ShadowProbe>* probes;
  const ExperimentConfig* config;
  attacker::ProbeOptions probeOptions;
  harness::InterruptModel interrupts;
  std::uint64_t seed;
};

struct TrialOutput {
  TrialResult result;
  harness::RunReport run;
};

TrialOutput runTrial(const TrialContext& ctx, std::uint64_t trial, bool keepTranscript) {
  const std::uint64_t ts = trialSeed(ctx.seed, trial);
  std::mt19937_64 rng(ts);
  const victims::VictimInput vi = ctx.spec->randomInput(rng);

  harness::Machine machine(ctx.config->predictor, splitmix(ts ^ 0x7469'6d69'6e67ULL));
  harness::RunOptions opts;
  opts.interrupts = ctx.interrupts;
  opts.flush = ctx.config->flush;
  opts.seed = splitmix(ts ^ 0x6972'7173ULL);
  opts.runId = trial;

  std::vector<attacker::WindowObservation> windows;
  const auto callback = [&](harness::Machine& m, const harness::WindowInfo& w) {
    attacker::WindowObservation obs;
    obs.instructions = w.instructions;
    std::vector<harness::TranscriptRow> rows;
    for (const auto& p : *ctx.probes) {
      const auto r = attacker::probe(p, m, ctx.probeOptions);
      obs.branches[p.target.addr] = r.inference;
      if (keepTranscript) {
        rows.push_back({0, 0, std::string(toString(p.target.kind)), p.target.addr, r.observation,
                        std::string(attacker::toString(r.inference))});
      }
    }
    windows.push_back(std::move(obs));
    return rows;
  };

  TrialOutput out;
  out.run = harness::runWithInterrupts(machine, *ctx.program, vi.input, opts, callback);
  TrialResult& tr = out.result;
  tr.trial = trial;
  tr.truth = ctx.spec->groundTruth(vi.params);
  tr.ipcProxy = out.run.ipcProxy;
  {
    harness::Machine benign(ctx.config->predictor, 0);
    harness::RunOptions bo = opts;
    bo.interruptsEnabled = false;
    tr.benignIpcProxy = harness::runWithInterrupts(benign, *ctx.program, vi.input, bo).ipcProxy;
  }
  tr.windows = windows.size();

  // Score each probe against the window's architectural branch history.
  std::size_t offset = 0;
  const auto& steps = out.run.trace.steps;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const std::vector<ir::TraceStep> slice(steps.begin() + static_cast<std::ptrdiff_t>(offset),
                                           steps.begin() + static_cast<std::ptrdiff_t>(offset + out.run.windows[w]));
    offset += out.run.windows[w];
    for (const auto& p : *ctx.probes) {
      const auto expected = attacker::expectedInference(p.target.kind, slice, p.target.addr);
      const bool ok = windows[w].branches.at(p.target.addr) == expected;
      ++tr.probes;
      tr.probesCorrect += ok;
      if (p.target.kind == BranchKind::Conditional) {
        if (expected == attacker::Inference::Taken) {
          ++tr.condTaken;
          tr.condTakenCorrect += ok;
        } else {
          ++tr.condNotTaken;
          tr.condNotTakenCorrect += ok;
        }
      }
    }
  }

  if (!out.run.trace.halted) {
    tr.inconsistent = true;
    tr.diagnostic = "victim did not halt within its fuel";
    return out;
  }
  try {
    // Paths the observations cannot tell apart are fine as long as they
    // reveal the same secret.
    const auto paths = attacker::reconstructCandidates(*ctx.program, windows, kMaxCandidatePaths);
    tr.recovered = ctx.spec->leakFromPath(*ctx.program, paths.front().steps);
    for (std::size_t i = 1; i < paths.size(); ++i) {
      if (ctx.spec->leakFromPath(*ctx.program, paths[i].steps) != tr.recovered) {
        throw InconsistencyError(std::to_string(paths.size()) + " candidate paths disagree on the secret");
      }
    }
    tr.match = tr.recovered == tr.truth;
  } catch (const InconsistencyError& e) {
    tr.recovered.clear();
    tr.inconsistent = true;
    tr.diagnostic = e.what();
  }
  return out;
}

TrialContext makeContext(const ExperimentConfig& config, const victims::VictimSpec& spec, const ir::Program& program,
                         const std::vector<attacker::ShadowProbe>& probes) {
  TrialContext ctx{&spec, &program, &probes, &config, {}, harness::InterruptModel::parse(config.interrupts),
                   config.requireSeed()};
  ctx.probeOptions.repeats = attacker::timingChannelOf(config.channel) ? config.repeats : 1;
  ctx.probeOptions.thresholds = attacker::Thresholds::derive(uarch::TimingChannelModel(0));
  return ctx;
}

}  // namespace

std::uint64_t trialSeed(std::uint64_t seed, std::uint64_t trial) { return splitmix(seed * 0x100000001b3ULL + trial); }

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "victim") {
    const auto ns = victims::names();
    if (std::find(ns.begin(), ns.end(), value) == ns.end()) throw ConfigError("unknown victim '" + value + "'");
    victim = value;
  } else if (key == "channel") {
    channel = attacker::parseProbeChannel(value);
  } else if (key == "predictor") {
    predictor = uarch::parsePredictorMode(value);
  } else if (key == "interrupts") {
    harness::InterruptModel::parse(value);
    interrupts = value;
  } else if (key == "flush") {
    flush = harness::FlushPolicy::parse(value);
  } else if (key == "trials") {
    trials = parseU64(key, value);
    if (trials == 0) throw ConfigError("trials must be positive");
  } else if (key == "seed") {
    seed = parseU64(key, value);
  } else if (key == "zigzagger") {
    zigzagger = parseBool(key, value);
  } else if (key == "zigzag_k") {
    if (value == "all") {
      zigzagK.reset();
    } else {
      const auto k = parseU64(key, value);
      if (k < 2) throw ConfigError("zigzag_k must be >= 2 or 'all'");
      zigzagK = static_cast<std::uint32_t>(k);
    }
  } else if (key == "repeats") {
    const auto r = parseU64(key, value);
    if (r == 0) throw ConfigError("repeats must be positive");
    repeats = static_cast<int>(r);
  } else if (key == "workers") {
    workers = static_cast<unsigned>(parseU64(key, value));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key=value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

std::uint64_t ExperimentConfig::requireSeed() const {
  if (seed) return *seed;
  if (const char* env = std::getenv(kSeedEnv); env && *env) return parseU64(kSeedEnv, env);
  throw ConfigError(std::string("no seed: set 'seed' or ") + kSeedEnv);
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::string seedText = "unset";
  try {
    seedText = std::to_string(requireSeed());
  } catch (const ConfigError&) {
  }
  return {{"victim", victim},
          {"channel", std::string(attacker::toString(channel))},
          {"predictor", std::string(uarch::toString(predictor))},
          {"interrupts", interrupts},
          {"flush", flush.toString()},
          {"trials", std::to_string(trials)},
          {"seed", seedText},
          {"zigzagger", zigzagger ? "on" : "off"},
          {"zigzag_k", zigzagK ? std::to_string(*zigzagK) : "all"},
          {"repeats", std::to_string(repeats)},
          {"penalty", std::to_string(uarch::kDefaultPenalty)}};
}

std::string ExperimentConfig::header() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += "# " + k + "=" + v + "\n";
  return out;
}

ir::Program attackedProgram(const victims::VictimSpec& spec, const ExperimentConfig& config) {
  if (!config.zigzagger) return spec.program;
  zigzagger::ZigzaggerConfig zc;
  zc.branchesPerTrampoline = config.zigzagK;
  zc.seed = config.requireSeed();
  return zigzagger::transform(spec.program, zc).program;
}

CampaignReport runAttack(const ExperimentConfig& config) {
  const auto spec = victims::byName(config.victim);
  const auto program = attackedProgram(spec, config);
  const auto probes = buildProbes(program, config.channel);
  const TrialContext ctx = makeContext(config, spec, program, probes);

  CampaignReport rep;
  rep.config = config;
  rep.trials.resize(config.trials);
  unsigned workers = config.workers ? config.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::uint64_t>(workers, config.trials));
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::uint64_t t = w; t < config.trials; t += workers) rep.trials[t] = runTrial(ctx, t, false).result;
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::uint64_t matches = 0, probesTotal = 0, probesOk = 0, ct = 0, ctOk = 0, cn = 0, cnOk = 0;
  double ipc = 0, benignIpc = 0;
  for (const auto& t : rep.trials) {
    matches += t.match;
    rep.inconsistentTrials += t.inconsistent;
    probesTotal += t.probes;
    probesOk += t.probesCorrect;
    ct += t.condTaken;
    ctOk += t.condTakenCorrect;
    cn += t.condNotTaken;
    cnOk += t.condNotTakenCorrect;
    ipc += t.ipcProxy;
    benignIpc += t.benignIpcProxy;
  }
  const auto n = static_cast<double>(rep.trials.size());
  rep.secretAccuracy = static_cast<double>(matches) / n;
  rep.probeAccuracy = probesTotal ? static_cast<double>(probesOk) / static_cast<double>(probesTotal) : 0.0;
  rep.conditionalTakenAccuracy = ct ? static_cast<double>(ctOk) / static_cast<double>(ct) : 0.0;
  rep.conditionalNotTakenAccuracy = cn ? static_cast<double>(cnOk) / static_cast<double>(cn) : 0.0;
  rep.conditionalProbes = ct + cn;
  if (ct && cn) {
    rep.branchAccuracy = 0.5 * (rep.conditionalTakenAccuracy + rep.conditionalNotTakenAccuracy);
  } else {
    rep.branchAccuracy = ct ? rep.conditionalTakenAccuracy : rep.conditionalNotTakenAccuracy;
  }
  rep.meanIpcProxy = ipc / n;
  rep.meanBenignIpcProxy = benignIpc / n;
  return rep;
}

std::string CampaignReport::toJson() const {
  json j;
  json cfg = json::object();
  for (const auto& [k, v] : config.entries()) cfg[k] = v;
  j["config"] = cfg;
  j["trials"] = trials.size();
  j["secret_accuracy"] = secretAccuracy;
  j["branch_accuracy"] = branchAccuracy;
  j["probe_accuracy"] = probeAccuracy;
  j["conditional_taken_accuracy"] = conditionalTakenAccuracy;
  j["conditional_not_taken_accuracy"] = conditionalNotTakenAccuracy;
  j["conditional_probes"] = conditionalProbes;
  j["mean_ipc_proxy"] = meanIpcProxy;
  j["mean_benign_ipc_proxy"] = meanBenignIpcProxy;
  j["inconsistent_trials"] = inconsistentTrials;
  auto& diag = j["diagnostics"] = json::array();
  for (const auto& t : trials) {
    if (t.inconsistent && diag.size() < 5) diag.push_back({{"trial", t.trial}, {"message", t.diagnostic}});
  }
  return j.dump(2);
}

std::string CampaignReport::secretsJsonLines() const {
  std::string out;
  for (const auto& t : trials) {
    for (const auto& [name, truth] : t.truth) {
      auto it = t.recovered.find(name);
      const std::string rec = it == t.recovered.end() ? "" : it->second;
      json j = {{"victim", config.victim},
                {"trial", t.trial},
                {"secret_name", name},
                {"recovered_value", it == t.recovered.end() ? json(nullptr) : json(rec)},
                {"ground_truth", truth},
                {"match", it != t.recovered.end() && rec == truth}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

std::vector<SweepRow> sweepFlush(const ExperimentConfig& config, const std::vector<std::uint64_t>& periods) {
  if (periods.empty()) throw ConfigError("sweep-flush needs at least one period");
  std::vector<SweepRow> rows;
  for (auto p : periods) {
    ExperimentConfig c = config;
    c.flush = harness::FlushPolicy::periodic(p);
    const auto rep = runAttack(c);
    rows.push_back({p, rep.branchAccuracy, rep.meanBenignIpcProxy});
  }
  return rows;
}

std::string sweepCsv(const ExperimentConfig& config, const std::vector<SweepRow>& rows) {
  ExperimentConfig shown = config;
  shown.flush = harness::FlushPolicy::none();
  std::string out = shown.header();
  out += "# flush=periodic (swept)\n";
  out += "period,attack_accuracy,mean_ipc_proxy\n";
  for (const auto& r : rows) out += std::to_string(r.period) + "," + fmt4(r.attackAccuracy) + "," + fmt4(r.meanIpcProxy) + "\n";
  return out;
}

std::vector<TimingRow> timingTable(std::uint64_t samples, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("timing-table needs at least one sample");
  uarch::TimingChannelModel model(seed);
  std::vector<TimingRow> rows;
  for (auto c : {uarch::TimingChannel::Rdtscp, uarch::TimingChannel::PtCyc, uarch::TimingChannel::LbrCycles}) {
    const auto ref = uarch::defaultChannelParams(c);
    for (bool mis : {false, true}) {
      double mean = 0, m2 = 0;
      for (std::uint64_t i = 0; i < samples; ++i) {
        const double x = model.sample(c, mis);
        const double d = x - mean;
        mean += d / static_cast<double>(i + 1);
        m2 += d * (x - mean);
      }
      TimingRow r;
      r.channel = c;
      r.mispredict = mis;
      r.mean = mean;
      r.degenerate = samples < 2;
      r.sigma = r.degenerate ? std::nan("") : std::sqrt(m2 / static_cast<double>(samples - 1));
      r.refMean = mis ? ref.meanMispredict : ref.meanCorrect;
      r.refSigma = mis ? ref.sigmaMispredict : ref.sigmaCorrect;
      rows.push_back(r);
    }
  }
  return rows;
}

std::string timingCsv(const std::vector<TimingRow>& rows, std::uint64_t samples, std::uint64_t seed) {
  std::string out = "# samples=" + std::to_string(samples) + "\n# seed=" + std::to_string(seed) + "\n";
  out += "channel,class,mean,sigma,ref_mean,ref_sigma,mean_err_pct,sigma_err_pct,degenerate\n";
  for (const auto& r : rows) {
    const double me = 100.0 * (r.mean - r.refMean) / r.refMean;
    const double se = r.degenerate ? std::nan("") : 100.0 * (r.sigma - r.refSigma) / r.refSigma;
    out += std::string(uarch::toString(r.channel)) + "," + (r.mispredict ? "mispredict" : "correct") + "," +
           fmt4(r.mean) + "," + (r.degenerate ? "nan" : fmt4(r.sigma)) + "," + fmt4(r.refMean) + "," +
           fmt4(r.refSigma) + "," + fmt4(me) + "," + (r.degenerate ? "nan" : fmt4(se)) + "," +
           (r.degenerate ? "1" : "0") + "\n";
  }
  return out;
}

ZigzagOutput zigzag(const std::string& irText, std::optional<std::uint32_t> k, std::uint64_t seed) {
  const ir::Program p = ir::assemble(irText);
  zigzagger::ZigzaggerConfig zc;
  zc.branchesPerTrampoline = k;
  zc.seed = seed;
  const auto r = zigzagger::transform(p, zc);
  return {ir::print(r.program), r.report.toJson()};
}

SingleRun reportRun(const ExperimentConfig& config) {
  const auto spec = victims::byName(config.victim);
  const auto program = attackedProgram(spec, config);
  const auto probes = buildProbes(program, config.channel);
  const TrialContext ctx = makeContext(config, spec, program, probes);
  auto out = runTrial(ctx, 0, true);
  SingleRun r;
  r.run = std::move(out.run);
  r.truth = out.result.truth;
  if (!out.result.inconsistent) r.recovered = out.result.recovered;
  r.diagnostic = out.result.diagnostic;
  return r;
}

std::string singleRunJson(const ExperimentConfig& config, const SingleRun& r) {
  json j;
  json cfg = json::object();
  for (const auto& [k, v] : config.entries()) cfg[k] = v;
  j["config"] = cfg;
  j["run"] = json::parse(r.run.toJson());
  j["ground_truth"] = leakJson(r.truth);
  j["recovered"] = r.recovered ? leakJson(*r.recovered) : json(nullptr);
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
  return j.dump(2);
}

std::map<std::string, std::string> corpusFiles(std::uint64_t seed, std::size_t samples) {
  const std::map<std::string, std::vector<victims::Params>> fixed = {
      {"strtol", {{{"text", "-42"}, {"base", "10"}}, {{"text", "+0"}, {"base", "10"}}, {{"text", "1A"}, {"base", "16"}}}},
      {"vfprintf", {{{"format", "%d%x"}}, {{"format", ""}}, {{"format", "%d%f"}}}},
      {"modexp",
       {{{"exponent", "11"}, {"bits", "4"}, {"modulus", "1000003"}, {"base", "12345"}},
        {{"exponent", "0"}, {"bits", "8"}, {"modulus", "1000003"}, {"base", "12345"}}}},
      {"libsvm", {{{"kernel", "RBF"}, {"features", "8"}}, {{"kernel", "LINEAR"}, {"features", "4"}}}},
      {"apache", {{{"method", "GET"}}, {{"method", "PUT"}}, {{"method", "MERGE"}}}},
      {"selector", {{{"a", "1"}, {"b", "0"}}, {{"a", "0"}, {"b", "1"}}, {{"a", "0"}, {"b", "0"}}}},
  };
  std::map<std::string, std::string> files;
  std::mt19937_64 rng(seed);
  for (const auto& spec : victims::allVictims()) {
    files[spec.name + ".ir"] = "# " + spec.name + ": " + spec.leakDescription + "\n" + ir::print(spec.program);
    json j;
    j["victim"] = spec.name;
    j["secret_schema"] = spec.secretSchema;
    j["leak_description"] = spec.leakDescription;
    j["seed"] = seed;
    auto& arr = j["cases"] = json::array();
    std::vector<victims::Params> cases;
    if (auto it = fixed.find(spec.name); it != fixed.end()) cases = it->second;
    for (std::size_t i = 0; i < samples; ++i) cases.push_back(spec.randomInput(rng).params);
    for (const auto& params : cases) {
      json pj = json::object();
      for (const auto& [k, v] : params) pj[k] = v;
      const auto lowered = spec.lower(params);
      json ij = json::object();
      for (const auto& [k, v] : lowered.input.values()) ij[k] = v;
      arr.push_back({{"params", pj}, {"input", ij}, {"leak", leakJson(spec.groundTruth(params))}});
    }
    files[spec.name + ".truth.json"] = j.dump(2) + "\n";
  }
  return files;
}

}  // namespace bshadow::campaign
