#include <algorithm>
#include <cmath>

#include "bshadow/uarch.hpp"

namespace bshadow::uarch {

namespace {

// Largest acceptable mass of the raw Gaussian below one cycle.
constexpr double kClampTolerance = 0.01;

std::size_t slot(TimingChannel c) {
  const auto i = static_cast<std::size_t>(c);
  if (i > 2) throw ConfigError("unknown timing channel " + std::to_string(i));
  return i;
}

}  // namespace

std::string_view toString(TimingChannel c) {
  switch (c) {
    case TimingChannel::Rdtscp: return "rdtscp";
    case TimingChannel::PtCyc: return "pt-cyc";
    case TimingChannel::LbrCycles: return "lbr-cycles";
  }
  throw ConfigError("unknown timing channel");
}

ChannelParams defaultChannelParams(TimingChannel c) {
  switch (c) {
    case TimingChannel::Rdtscp: return {94.21, 13.10, 120.61, 806.56};
    case TimingChannel::PtCyc: return {59.59, 14.44, 90.64, 191.48};
    case TimingChannel::LbrCycles: return {25.69, 9.72, 35.04, 10.52};
  }
  throw ConfigError("unknown timing channel");
}

TimingChannelModel::TimingChannelModel(std::uint64_t seed) : seed_(seed), rng_(seed) {
  for (auto c : {TimingChannel::Rdtscp, TimingChannel::PtCyc, TimingChannel::LbrCycles}) {
    params_[slot(c)] = defaultChannelParams(c);
  }
}

const ChannelParams& TimingChannelModel::params(TimingChannel c) const { return params_[slot(c)]; }

void TimingChannelModel::setParams(TimingChannel c, ChannelParams p) {
  if (p.sigmaCorrect < 0 || p.sigmaMispredict < 0 || p.meanCorrect < 1 || p.meanMispredict < 1) {
    throw ConfigError("timing parameters need means >= 1 and non-negative sigmas");
  }
  params_[slot(c)] = p;
}

bool TimingChannelModel::usesGamma(double mean, double sigma) {
  if (sigma <= 0) return false;
  const double below = 0.5 * std::erfc((mean - 1.0) / (sigma * std::sqrt(2.0)));
  return below > kClampTolerance;
}

double TimingChannelModel::draw(double mean, double sigma) {
  if (sigma <= 0) return mean;
  if (!usesGamma(mean, sigma)) {
    std::normal_distribution<double> n(mean, sigma);
    return std::max(1.0, n(rng_));
  }
  const double excess = mean - 1.0;
  const double shape = (excess / sigma) * (excess / sigma);
  const double scale = sigma * sigma / excess;
  std::gamma_distribution<double> g(shape, scale);
  return 1.0 + g(rng_);
}

double TimingChannelModel::sample(TimingChannel c, bool mispredict) {
  const ChannelParams& p = params_[slot(c)];
  return mispredict ? draw(p.meanMispredict, p.sigmaMispredict) : draw(p.meanCorrect, p.sigmaCorrect);
}

TimingChannelModel TimingChannelModel::fork(std::uint64_t salt) const {
  std::seed_seq seq{seed_, salt, std::uint64_t{0x9e3779b97f4a7c15ULL}};
  std::uint64_t s = 0;
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  s = (std::uint64_t{words[0]} << 32) | words[1];
  TimingChannelModel m(s);
  for (std::size_t i = 0; i < 3; ++i) m.params_[i] = params_[i];
  return m;
}

}  // namespace bshadow::uarch
