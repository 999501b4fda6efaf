// bshadow: batch driver for shadowing campaigns, flush sweeps, the
// trampoline transform and timing tables.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "bshadow/campaign.hpp"

namespace fs = std::filesystem;
using namespace bshadow;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitInconsistent = 2;

std::string readFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void writeOut(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

// Options shared by every experiment subcommand.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::string victim, channel, predictor, interrupts, flush;
  std::optional<std::uint64_t> trials, seed;
  std::optional<int> repeats;
  std::optional<unsigned> workers;
  bool zigzagger = false;
  std::string zigzagK;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "key=value experiment file");
    app->add_option("--set", sets, "extra key=value override (repeatable)");
    app->add_option("--victim", victim);
    app->add_option("--channel", channel, "lbr-flag | lbr-cycles | pt-cyc | rdtscp");
    app->add_option("--predictor", predictor, "btb-only | gshare");
    app->add_option("--interrupts", interrupts, "normal | cache-disabled");
    app->add_option("--flush", flush, "none | on-switch | periodic:N");
    app->add_option("--trials", trials);
    app->add_option("--seed", seed, "overrides $BSHADOW_SEED");
    app->add_option("--repeats", repeats);
    app->add_option("--workers", workers);
    app->add_flag("--zigzagger", zigzagger, "attack the trampoline-transformed victim");
    app->add_option("--zigzag-k", zigzagK, "branches per trampoline or 'all'");
  }

  campaign::ExperimentConfig build() const {
    campaign::ExperimentConfig c = file.empty() ? campaign::ExperimentConfig{}
                                                : campaign::ExperimentConfig::parse(readFile(file));
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!victim.empty()) c.set("victim", victim);
    if (!channel.empty()) c.set("channel", channel);
    if (!predictor.empty()) c.set("predictor", predictor);
    if (!interrupts.empty()) c.set("interrupts", interrupts);
    if (!flush.empty()) c.set("flush", flush);
    if (trials) c.set("trials", std::to_string(*trials));
    if (seed) c.seed = *seed;
    if (repeats) c.set("repeats", std::to_string(*repeats));
    if (workers) c.workers = *workers;
    if (zigzagger) c.zigzagger = true;
    if (!zigzagK.empty()) c.set("zigzag_k", zigzagK);
    c.requireSeed();
    return c;
  }
};

std::uint64_t seedOrEnv(const std::optional<std::uint64_t>& flag) {
  campaign::ExperimentConfig c;
  c.seed = flag;
  return c.requireSeed();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"branch shadowing lab"};
  app.require_subcommand(1);

  ConfigFlags attackFlags;
  std::string attackOut, secretsOut;
  bool strict = false;
  auto* attack = app.add_subcommand("attack", "run a shadowing campaign and print its JSON report");
  attackFlags.attach(attack);
  attack->add_option("-o,--out", attackOut, "report path (default stdout)");
  attack->add_option("--secrets", secretsOut, "per-secret JSON lines");
  attack->add_flag("--strict", strict, "exit 2 if any trial is inconsistent or mismatched");

  ConfigFlags sweepFlags;
  std::vector<std::uint64_t> periods;
  std::string sweepOut;
  auto* sweep = app.add_subcommand("sweep-flush", "attack accuracy and IPC proxy per periodic flush period");
  sweepFlags.attach(sweep);
  sweep->add_option("--periods", periods, "flush periods in cycles")->delimiter(',');
  sweep->add_option("-o,--out", sweepOut);

  std::string zzIn, zzOut, zzReport, zzK = "all";
  std::optional<std::uint64_t> zzSeed;
  auto* zz = app.add_subcommand("zigzag", "apply the trampoline transform to an IR file");
  zz->add_option("input", zzIn, "IR text file")->required();
  zz->add_option("-k,--k", zzK, "branches per trampoline or 'all'");
  zz->add_option("--seed", zzSeed);
  zz->add_option("-o,--out", zzOut, "transformed IR (default stdout)");
  zz->add_option("--report", zzReport, "report JSON path (default stderr)");

  std::uint64_t ttSamples = 1000000;
  std::optional<std::uint64_t> ttSeed;
  std::string ttOut;
  auto* tt = app.add_subcommand("timing-table", "sample every timing channel and compare with reference values");
  tt->add_option("-n,--samples", ttSamples);
  tt->add_option("--seed", ttSeed);
  tt->add_option("-o,--out", ttOut);

  ConfigFlags reportFlags;
  std::string reportOut, transcriptOut;
  auto* report = app.add_subcommand("report", "one instrumented attack run with its probe transcript");
  reportFlags.attach(report);
  report->add_option("-o,--out", reportOut, "run JSON (default stdout)");
  report->add_option("--transcript", transcriptOut, "probe transcript CSV");

  std::string corpusDir;
  std::optional<std::uint64_t> corpusSeed;
  std::size_t corpusSamples = 8;
  auto* corpus = app.add_subcommand("corpus", "write victim IR images and ground-truth files");
  corpus->add_option("dir", corpusDir)->required();
  corpus->add_option("--seed", corpusSeed);
  corpus->add_option("--samples", corpusSamples, "random cases per victim");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*attack) {
      const auto cfg = attackFlags.build();
      const auto rep = campaign::runAttack(cfg);
      writeOut(attackOut, rep.toJson() + "\n");
      if (!secretsOut.empty()) writeOut(secretsOut, rep.secretsJsonLines());
      if (strict && rep.secretAccuracy < 1.0) {
        std::cerr << "bshadow: " << rep.inconsistentTrials << " inconsistent trial(s), secret accuracy "
                  << rep.secretAccuracy << "\n";
        return kExitInconsistent;
      }
    } else if (*sweep) {
      const auto cfg = sweepFlags.build();
      writeOut(sweepOut, campaign::sweepCsv(cfg, campaign::sweepFlush(cfg, periods)));
    } else if (*zz) {
      std::optional<std::uint32_t> k;
      if (zzK != "all") {
        campaign::ExperimentConfig probe;
        probe.set("zigzag_k", zzK);
        k = probe.zigzagK;
      }
      const auto out = campaign::zigzag(readFile(zzIn), k, seedOrEnv(zzSeed));
      writeOut(zzOut, out.program);
      if (zzReport.empty()) {
        std::cerr << out.reportJson << "\n";
      } else {
        writeOut(zzReport, out.reportJson + "\n");
      }
    } else if (*tt) {
      const auto seed = seedOrEnv(ttSeed);
      writeOut(ttOut, campaign::timingCsv(campaign::timingTable(ttSamples, seed), ttSamples, seed));
    } else if (*report) {
      const auto cfg = reportFlags.build();
      const auto run = campaign::reportRun(cfg);
      writeOut(reportOut, campaign::singleRunJson(cfg, run) + "\n");
      if (!transcriptOut.empty()) writeOut(transcriptOut, run.run.transcriptCsv());
      if (!run.recovered || *run.recovered != run.truth) {
        std::cerr << "bshadow: recovered secret disagrees with ground truth"
                  << (run.diagnostic.empty() ? "" : ": " + run.diagnostic) << "\n";
        return kExitInconsistent;
      }
    } else if (*corpus) {
      fs::create_directories(corpusDir);
      for (const auto& [name, text] : campaign::corpusFiles(seedOrEnv(corpusSeed), corpusSamples)) {
        writeOut((fs::path(corpusDir) / name).string(), text);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "bshadow: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const AssembleError& e) {
    std::cerr << "bshadow: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "bshadow: " << e.what() << "\n";
    return kExitInconsistent;
  }
  return 0;
}
