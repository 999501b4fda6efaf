#include "bshadow/victims.hpp"

#include <algorithm>
#include <charconv>
#include <set>

namespace bshadow::victims {

namespace {

using ir::BinOp;
using ir::Operand;
using ir::ProgramBuilder;

Operand R(int r) { return Operand::reg(static_cast<ir::Reg>(r)); }
Operand I(std::int64_t v) { return Operand::imm(v); }

const std::string& param(const Params& p, const std::string& key) {
  auto it = p.find(key);
  if (it == p.end()) throw ConfigError("missing victim parameter '" + key + "'");
  return it->second;
}

std::int64_t toInt(const std::string& s) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw ConfigError("not an integer: '" + s + "'");
  return v;
}

std::uint64_t toU64(const std::string& s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw ConfigError("not an unsigned integer: '" + s + "'");
  return v;
}

std::vector<std::int64_t> cstring(const std::string& s) {
  std::vector<std::int64_t> out(s.begin(), s.end());
  out.push_back(0);
  return out;
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += xs[i];
  }
  return out;
}

// Number of times each named label's instruction appears on the path, and the
// outcome sequence of each named branch.
struct PathView {
  const ir::Program& program;
  const std::vector<ir::TraceStep>& steps;

  VirtualAddress at(std::string_view label) const { return program.labelOrThrow(label); }
};

}  // namespace

std::uint32_t montgomeryNPrime(std::uint32_t n) {
  if ((n & 1) == 0) throw ConfigError("Montgomery modulus must be odd");
  std::uint32_t inv = 1;
  for (int i = 0; i < 5; ++i) inv *= 2 - n * inv;  // Newton: inv = n^-1 mod 2^32
  return static_cast<std::uint32_t>(0u - inv);
}

std::uint64_t montgomeryMul(std::uint64_t a, std::uint64_t b, std::uint32_t n, std::uint32_t nprime,
                            bool* subtracted) {
  __extension__ using u128 = unsigned __int128;
  const u128 t = static_cast<u128>(a) * b;
  const std::uint64_t m = static_cast<std::uint32_t>(static_cast<std::uint32_t>(t) * static_cast<std::uint64_t>(nprime));
  const std::uint64_t u = static_cast<std::uint64_t>((t + static_cast<u128>(m) * n) >> 32);
  const bool sub = u >= n;
  if (subtracted) *subtracted = sub;
  return sub ? u - n : u;
}

// ---------------------------------------------------------------------------
// strtol: sign, digit count and per-digit letter flags.

VictimSpec buildStrtol() {
  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start")
      .mov(1, I(0))
      .mov(2, I(0))
      .mov(5, I(0))
      .mov(6, I(0))
      .input(3, "base")
      .input(4, "s", R(1))
      .op(BinOp::Eq, 7, R(4), I('-'))
      .label("sign_minus_br")
      .br(7, "neg")
      .op(BinOp::Eq, 7, R(4), I('+'))
      .label("sign_plus_br")
      .br(7, "skip_sign")
      .jmp("loop")
      .label("neg")
      .mov(2, I(1))
      .label("skip_sign")
      .op(BinOp::Add, 1, R(1), I(1))
      .label("loop")
      .input(4, "s", R(1))
      .op(BinOp::Eq, 7, R(4), I(0))
      .label("end_br")
      .br(7, "done")
      .op(BinOp::Le, 8, I('0'), R(4))
      .op(BinOp::Le, 9, R(4), I('9'))
      .op(BinOp::And, 8, R(8), R(9))
      .label("digit_br")
      .br(8, "digit")
      .op(BinOp::Or, 9, R(4), I(32))
      .op(BinOp::Le, 10, I('a'), R(9))
      .op(BinOp::Le, 11, R(9), I('z'))
      .op(BinOp::And, 10, R(10), R(11))
      .label("alpha_br")
      .br(10, "alpha")
      .jmp("done")
      .label("digit")
      .op(BinOp::Sub, 4, R(4), I('0'))
      .jmp("check")
      .label("alpha")
      .op(BinOp::Sub, 4, R(9), I('a' - 10))
      .label("check")
      .op(BinOp::Lt, 7, R(4), R(3))
      .op(BinOp::Xor, 7, R(7), I(1))
      .label("range_br")
      .br(7, "done")
      .label("accum")
      .op(BinOp::Mul, 5, R(5), R(3))
      .op(BinOp::Add, 5, R(5), R(4))
      .op(BinOp::Add, 6, R(6), I(1))
      .op(BinOp::Add, 1, R(1), I(1))
      .jmp("loop")
      .label("done")
      .label("negate_br")
      .br(2, "negate")
      .jmp("out")
      .label("negate")
      .op(BinOp::Sub, 5, I(0), R(5))
      .label("out")
      .halt();

  VictimSpec v;
  v.name = "strtol";
  v.program = b.build();
  v.secretSchema = {"sign", "length", "alpha"};
  v.leakDescription = "sign of the number, count of accepted digits, and which digits were letters";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    const auto base = toInt(param(p, "base"));
    if (base != 10 && base != 16) throw ConfigError("strtol base must be 10 or 16");
    in.input.set("s", cstring(param(p, "text"))).set("base", base);
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const std::string& s = param(p, "text");
    const std::int64_t base = toInt(param(p, "base"));
    std::size_t i = 0;
    bool neg = false;
    if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
      neg = s[0] == '-';
      i = 1;
    }
    std::string alpha;
    for (; i < s.size(); ++i) {
      const unsigned char c = static_cast<unsigned char>(s[i]);
      int d = 0;
      bool letter = false;
      if (c >= '0' && c <= '9') {
        d = c - '0';
      } else if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
        d = (c | 32) - 'a' + 10;
        letter = true;
      } else {
        break;
      }
      if (d >= base) break;
      alpha += letter ? '1' : '0';
    }
    return Leak{{"sign", neg ? "neg" : "pos"}, {"length", std::to_string(alpha.size())}, {"alpha", alpha}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    const PathView pv{prog, steps};
    const auto minus = pv.at("sign_minus_br"), alphaBr = pv.at("alpha_br"), accum = pv.at("accum");
    bool neg = false, letter = false;
    std::string alpha;
    for (const auto& s : steps) {
      if (s.addr == minus && s.branch && s.branch->taken) neg = true;
      if (s.addr == alphaBr && s.branch) letter = s.branch->taken;
      if (s.addr == pv.at("digit_br") && s.branch && s.branch->taken) letter = false;
      if (s.addr == accum) alpha += letter ? '1' : '0';
    }
    return Leak{{"sign", neg ? "neg" : "pos"}, {"length", std::to_string(alpha.size())}, {"alpha", alpha}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    const int base = std::uniform_int_distribution<int>(0, 1)(rng) ? 16 : 10;
    static constexpr std::string_view kSigns[] = {"", "+", "-"};
    std::string text(kSigns[std::uniform_int_distribution<int>(0, 2)(rng)]);
    const std::string digits = base == 16 ? "0123456789abcdefABCDEF" : "0123456789";
    const int n = std::uniform_int_distribution<int>(0, 7)(rng);
    for (int i = 0; i < n; ++i) {
      text += digits[std::uniform_int_distribution<std::size_t>(0, digits.size() - 1)(rng)];
    }
    static constexpr std::string_view kJunk = " zG.";
    if (std::uniform_int_distribution<int>(0, 2)(rng) == 0) {
      text += kJunk[std::uniform_int_distribution<std::size_t>(0, kJunk.size() - 1)(rng)];
    }
    return lower({{"text", text}, {"base", std::to_string(base)}});
  };
  return v;
}

// ---------------------------------------------------------------------------
// vfprintf: conversion sequence of the format string.

namespace {
struct Conversion {
  char letter;
  const char* type;
};
constexpr Conversion kConversions[] = {{'d', "T_INT"},    {'x', "T_UNSIGNED"}, {'p', "T_POINTER"},
                                       {'f', "T_DOUBLE"}, {'s', "T_STRING"},   {'c', "T_CHAR"}};
}  // namespace

VictimSpec buildVfprintf() {
  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start").mov(1, I(0));
  b.label("loop")
      .input(2, "fmt", R(1))
      .op(BinOp::Eq, 3, R(2), I(0))
      .label("end_br")
      .br(3, "done")
      .op(BinOp::Eq, 3, R(2), I('%'))
      .label("pct_br")
      .br(3, "spec")
      .compute(2)
      .op(BinOp::Add, 1, R(1), I(1))
      .jmp("loop");
  b.label("spec").op(BinOp::Add, 1, R(1), I(1)).input(2, "fmt", R(1));
  for (const auto& c : kConversions) {
    const std::string l(1, c.letter);
    b.op(BinOp::Eq, 3, R(2), I(c.letter)).label("spec_" + l + "_br").br(3, "conv_" + l);
  }
  b.op(BinOp::Eq, 3, R(2), I('%')).label("spec_pct_br").br(3, "literal_pct");
  b.op(BinOp::Eq, 3, R(2), I(0)).label("spec_end_br").br(3, "done");
  b.compute(1).jmp("next");
  int cost = 3;
  for (const auto& c : kConversions) {
    b.label("conv_" + std::string(1, c.letter)).compute(static_cast<std::uint32_t>(cost++)).jmp("next");
  }
  b.label("literal_pct").compute(2);
  b.label("next").op(BinOp::Add, 1, R(1), I(1)).jmp("loop");
  b.label("done").halt();

  VictimSpec v;
  v.name = "vfprintf";
  v.program = b.build();
  v.secretSchema = {"conversions", "types"};
  v.leakDescription = "sequence of conversion specifiers and the argument type table";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    in.input.set("fmt", cstring(param(p, "format")));
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const std::string& f = param(p, "format");
    std::vector<std::string> conv, types;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f[i] != '%') continue;
      if (++i >= f.size()) break;
      for (const auto& c : kConversions) {
        if (f[i] == c.letter) {
          conv.emplace_back(1, c.letter);
          types.emplace_back(c.type);
        }
      }
    }
    return Leak{{"conversions", join(conv)}, {"types", join(types)}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    std::map<VirtualAddress, const Conversion*> blocks;
    for (const auto& c : kConversions) blocks[prog.labelOrThrow("conv_" + std::string(1, c.letter))] = &c;
    std::vector<std::string> conv, types;
    for (const auto& s : steps) {
      if (auto it = blocks.find(s.addr); it != blocks.end()) {
        conv.emplace_back(1, it->second->letter);
        types.emplace_back(it->second->type);
      }
    }
    return Leak{{"conversions", join(conv)}, {"types", join(types)}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    static constexpr std::string_view kSpecs = "dxpfsc%q";
    static constexpr std::string_view kText = "ab =:";
    std::string f;
    const int n = std::uniform_int_distribution<int>(0, 6)(rng);
    for (int i = 0; i < n; ++i) {
      if (std::uniform_int_distribution<int>(0, 2)(rng) == 0) {
        f += kText[std::uniform_int_distribution<std::size_t>(0, kText.size() - 1)(rng)];
      } else {
        f += '%';
        f += kSpecs[std::uniform_int_distribution<std::size_t>(0, kSpecs.size() - 1)(rng)];
      }
    }
    if (std::uniform_int_distribution<int>(0, 7)(rng) == 0) f += '%';
    return lower({{"format", f}});
  };
  return v;
}

// ---------------------------------------------------------------------------
// Square-and-multiply over Montgomery multiplication with a dummy
// subtraction on the no-reduction path.

namespace {
// u = REDC(r8) into r5; the branch is taken on the dummy path.
void emitRedc(ProgramBuilder& b, const std::string& prefix) {
  b.op(BinOp::And, 10, R(8), I(0xFFFFFFFF))
      .op(BinOp::Mul, 10, R(10), R(3))
      .op(BinOp::And, 10, R(10), I(0xFFFFFFFF))
      .op(BinOp::Mul, 10, R(10), R(2))
      .op(BinOp::Add, 10, R(10), R(8))
      .op(BinOp::Shr, 10, R(10), I(32))
      .op(BinOp::Lt, 11, R(10), R(2))
      .label(prefix + "_sub_br")
      .br(11, prefix + "_dummy")
      .op(BinOp::Sub, 5, R(10), R(2))
      .jmp(prefix + "_done")
      .label(prefix + "_dummy")
      .op(BinOp::Sub, 12, R(10), R(2))
      .mov(5, R(10))
      .label(prefix + "_done");
}

std::string exponentBits(std::uint64_t e, int bits) {
  std::string out;
  for (int i = bits - 1; i >= 0; --i) out += ((e >> i) & 1) ? '1' : '0';
  return out;
}
}  // namespace

VictimSpec buildModexpMontmul() {
  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start")
      .input(1, "nbits")
      .input(2, "n")
      .input(3, "nprime")
      .input(4, "xm")
      .input(5, "onem")
      .mov(6, I(0));
  b.label("loop").op(BinOp::Lt, 7, R(6), R(1)).op(BinOp::Xor, 7, R(7), I(1)).label("loop_br").br(7, "done");
  b.label("square").op(BinOp::Mul, 8, R(5), R(5));
  emitRedc(b, "sq");
  b.input(9, "e", R(6)).label("bit_br").br(9, "multiply").jmp("next");
  b.label("multiply").op(BinOp::Mul, 8, R(5), R(4));
  emitRedc(b, "mul");
  b.label("next").op(BinOp::Add, 6, R(6), I(1)).jmp("loop");
  b.label("done").halt();

  VictimSpec v;
  v.name = "modexp";
  v.program = b.build();
  v.secretSchema = {"exponent", "subtractions"};
  v.leakDescription = "exponent bits (MSB first) and, per Montgomery multiplication, real (R) or dummy (D) subtraction";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    const std::uint64_t e = toU64(param(p, "exponent"));
    const auto bits = toInt(param(p, "bits"));
    const std::uint64_t n = toU64(param(p, "modulus"));
    const std::uint64_t x = toU64(param(p, "base"));
    if (bits < 1 || bits > 64) throw ConfigError("exponent bit count must be 1..64");
    if (n < 3 || n >= (std::uint64_t{1} << 31) || (n & 1) == 0) throw ConfigError("modulus must be odd and < 2^31");
    if (x >= n) throw ConfigError("base must be below the modulus");
    std::vector<std::int64_t> ebits;
    for (char c : exponentBits(e, static_cast<int>(bits))) ebits.push_back(c == '1');
    const auto nn = static_cast<std::uint32_t>(n);
    in.input.set("e", ebits)
        .set("nbits", bits)
        .set("n", static_cast<std::int64_t>(n))
        .set("nprime", montgomeryNPrime(nn))
        .set("xm", static_cast<std::int64_t>((x << 32) % n))
        .set("onem", static_cast<std::int64_t>((std::uint64_t{1} << 32) % n));
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const std::uint64_t e = toU64(param(p, "exponent"));
    const int bits = static_cast<int>(toInt(param(p, "bits")));
    const auto n = static_cast<std::uint32_t>(toU64(param(p, "modulus")));
    const std::uint64_t x = toU64(param(p, "base"));
    const std::uint32_t np = montgomeryNPrime(n);
    const std::uint64_t xm = (x << 32) % n;
    std::uint64_t a = (std::uint64_t{1} << 32) % n;
    std::string subs;
    const std::string eb = exponentBits(e, bits);
    for (char bit : eb) {
      bool s = false;
      a = montgomeryMul(a, a, n, np, &s);
      subs += s ? 'R' : 'D';
      if (bit == '1') {
        a = montgomeryMul(a, xm, n, np, &s);
        subs += s ? 'R' : 'D';
      }
    }
    return Leak{{"exponent", eb}, {"subtractions", subs}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    const auto bit = prog.labelOrThrow("bit_br");
    const auto sq = prog.labelOrThrow("sq_sub_br");
    const auto mul = prog.labelOrThrow("mul_sub_br");
    std::string eb, subs;
    for (const auto& s : steps) {
      if (!s.branch) continue;
      if (s.addr == bit) eb += s.branch->taken ? '1' : '0';
      if (s.addr == sq || s.addr == mul) subs += s.branch->taken ? 'D' : 'R';
    }
    return Leak{{"exponent", eb}, {"subtractions", subs}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    const std::uint64_t e = rng();
    const std::uint64_t n = std::uniform_int_distribution<std::uint64_t>(1u << 29, (1u << 30) - 1)(rng) * 2 + 1;
    const std::uint64_t x = std::uniform_int_distribution<std::uint64_t>(2, n - 1)(rng);
    return lower({{"exponent", std::to_string(e)},
                  {"bits", "64"},
                  {"modulus", std::to_string(n)},
                  {"base", std::to_string(x)}});
  };
  return v;
}

// ---------------------------------------------------------------------------
// LIBSVM kernel evaluation: kernel type and, for RBF, the feature count.

namespace {
constexpr const char* kKernels[] = {"LINEAR", "POLY", "RBF", "SIGMOID", "PRECOMPUTED"};

int kernelId(const std::string& name) {
  for (int i = 0; i < 5; ++i) {
    if (name == kKernels[i]) return i;
  }
  throw ConfigError("unknown kernel type '" + name + "'");
}
}  // namespace

VictimSpec buildLibsvmKernel() {
  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start").input(1, "kernel").input(2, "nfeat").mov(3, I(0)).mov(4, I(0));
  b.op(BinOp::Eq, 5, R(1), I(0)).label("linear_br").br(5, "dot");
  b.op(BinOp::Eq, 5, R(1), I(1)).label("poly_br").br(5, "dot");
  b.op(BinOp::Eq, 5, R(1), I(2)).label("rbf_br").br(5, "rbf");
  b.op(BinOp::Eq, 5, R(1), I(3)).label("sigmoid_br").br(5, "dot");
  b.label("precomputed").input(4, "x", I(0)).jmp("out");

  b.label("dot").op(BinOp::Lt, 5, R(3), R(2)).op(BinOp::Xor, 5, R(5), I(1)).label("dot_loop_br").br(5, "dot_done");
  b.input(6, "x", R(3)).input(7, "y", R(3)).op(BinOp::Mul, 6, R(6), R(7)).op(BinOp::Add, 4, R(4), R(6));
  b.op(BinOp::Add, 3, R(3), I(1)).jmp("dot");
  b.label("dot_done").op(BinOp::Eq, 5, R(1), I(1)).label("post_poly_br").br(5, "poly_pow");
  b.op(BinOp::Eq, 5, R(1), I(3)).label("post_sigmoid_br").br(5, "sigmoid_tanh");
  b.jmp("out");
  b.label("poly_pow").compute(4).jmp("out");
  b.label("sigmoid_tanh").compute(6).jmp("out");

  b.label("rbf").op(BinOp::Lt, 5, R(3), R(2)).op(BinOp::Xor, 5, R(5), I(1)).label("rbf_loop_br").br(5, "rbf_done");
  b.label("rbf_body").input(6, "x", R(3)).input(7, "y", R(3)).op(BinOp::Sub, 6, R(6), R(7));
  b.op(BinOp::Mul, 6, R(6), R(6)).op(BinOp::Add, 4, R(4), R(6)).op(BinOp::Add, 3, R(3), I(1)).jmp("rbf");
  b.label("rbf_done").compute(8);
  b.label("out").halt();

  VictimSpec v;
  v.name = "libsvm";
  v.program = b.build();
  v.secretSchema = {"kernel", "features"};
  v.leakDescription = "kernel type and, for RBF, the number of features processed";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    const int k = kernelId(param(p, "kernel"));
    const auto n = toInt(param(p, "features"));
    if (n < 1) throw ConfigError("feature count must be positive");
    std::vector<std::int64_t> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      x[static_cast<std::size_t>(i)] = (i * 7 + 3) % 11;
      y[static_cast<std::size_t>(i)] = (i * 5 + 1) % 13;
    }
    in.input.set("kernel", k).set("nfeat", n).set("x", x).set("y", y);
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const std::string& k = param(p, "kernel");
    kernelId(k);
    return Leak{{"kernel", k}, {"features", k == "RBF" ? param(p, "features") : "-"}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    const VirtualAddress brs[] = {prog.labelOrThrow("linear_br"), prog.labelOrThrow("poly_br"),
                                  prog.labelOrThrow("rbf_br"), prog.labelOrThrow("sigmoid_br")};
    const auto body = prog.labelOrThrow("rbf_body");
    int kernel = 4;
    int trips = 0;
    for (const auto& s : steps) {
      for (int i = 0; i < 4; ++i) {
        if (s.addr == brs[i] && s.branch && s.branch->taken && kernel == 4) kernel = i;
      }
      if (s.addr == body) ++trips;
    }
    return Leak{{"kernel", kKernels[kernel]}, {"features", kernel == 2 ? std::to_string(trips) : "-"}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    return lower({{"kernel", kKernels[std::uniform_int_distribution<int>(0, 4)(rng)]},
                  {"features", std::to_string(std::uniform_int_distribution<int>(1, 12)(rng))}});
  };
  return v;
}

// ---------------------------------------------------------------------------
// Apache builtin method lookup: nested switch on length and characters.

namespace {
constexpr const char* kMethods[] = {"GET",   "PUT",   "HEAD",  "POST",   "COPY",   "MOVE",   "LOCK",
                                    "MKCOL", "MERGE", "PATCH", "DELETE", "UNLOCK", "OPTIONS"};

std::string methodLabel(const std::string& m) { return "m_" + m; }

// Dispatch on character `pos` among `group` (all of equal length, agreeing
// on characters before pos), then verify the remainder branch-free.
void emitMethodNode(ProgramBuilder& b, const std::vector<std::string>& group, std::size_t pos, int& uid) {
  if (group.size() == 1) {
    const std::string& m = group.front();
    b.mov(3, I(1));
    for (std::size_t k = pos; k < m.size(); ++k) {
      b.input(4, "m", I(static_cast<std::int64_t>(k)))
          .op(BinOp::Eq, 4, R(4), I(m[k]))
          .op(BinOp::And, 3, R(3), R(4));
    }
    b.label("verify_" + m + "_br").br(3, methodLabel(m)).jmp("invalid");
    return;
  }
  std::map<char, std::vector<std::string>> byChar;
  for (const auto& m : group) byChar[m[pos]].push_back(m);
  const int id = uid++;
  std::vector<std::string> targets;
  b.input(2, "m", I(static_cast<std::int64_t>(pos)));
  for (const auto& [c, sub] : byChar) {
    const std::string tgt = "node" + std::to_string(id) + "_" + std::string(1, c);
    b.op(BinOp::Eq, 3, R(2), I(c)).label(tgt + "_br").br(3, tgt);
    targets.push_back(tgt);
  }
  b.jmp("invalid");
  for (const auto& [c, sub] : byChar) {
    b.label("node" + std::to_string(id) + "_" + std::string(1, c));
    emitMethodNode(b, sub, pos + 1, uid);
  }
}
}  // namespace

VictimSpec buildApacheLookup() {
  std::map<std::size_t, std::vector<std::string>> byLen;
  for (const char* m : kMethods) byLen[std::string(m).size()].push_back(m);

  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start").input(1, "len");
  for (const auto& [len, group] : byLen) {
    b.op(BinOp::Eq, 3, R(1), I(static_cast<std::int64_t>(len)))
        .label("len" + std::to_string(len) + "_br")
        .br(3, "len" + std::to_string(len));
  }
  b.jmp("invalid");
  int uid = 0;
  for (const auto& [len, group] : byLen) {
    b.label("len" + std::to_string(len));
    emitMethodNode(b, group, 0, uid);
  }
  int id = 1;
  for (const char* m : kMethods) b.label(methodLabel(m)).mov(15, I(id++)).jmp("out");
  b.label("invalid").mov(15, I(0));
  b.label("out").halt();

  VictimSpec v;
  v.name = "apache";
  v.program = b.build();
  v.secretSchema = {"method"};
  v.leakDescription = "HTTP method recognised by the builtin lookup (M_INVALID if none)";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    const std::string& m = param(p, "method");
    std::vector<std::int64_t> chars(m.begin(), m.end());
    if (chars.empty()) chars.push_back(0);
    in.input.set("m", chars).set("len", static_cast<std::int64_t>(m.size()));
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const std::string& m = param(p, "method");
    for (const char* known : kMethods) {
      if (m == known) return Leak{{"method", "M_" + m}};
    }
    return Leak{{"method", "M_INVALID"}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    std::map<VirtualAddress, std::string> rets;
    for (const char* m : kMethods) rets[prog.labelOrThrow(methodLabel(m))] = m;
    for (const auto& s : steps) {
      if (auto it = rets.find(s.addr); it != rets.end()) return Leak{{"method", "M_" + it->second}};
    }
    return Leak{{"method", "M_INVALID"}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    const std::size_t n = std::size(kMethods);
    const auto pick = std::uniform_int_distribution<std::size_t>(0, n + 2)(rng);
    std::string m;
    if (pick < n) {
      m = kMethods[pick];
    } else {
      // Near misses: a real method with one character changed.
      m = kMethods[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)];
      const auto at = std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng);
      m[at] = static_cast<char>('A' + (m[at] - 'A' + 1 + std::uniform_int_distribution<int>(0, 24)(rng)) % 26);
    }
    return lower({{"method", m}});
  };
  return v;
}

// ---------------------------------------------------------------------------
// if / else-if / else.

VictimSpec buildSelector() {
  ProgramBuilder b(kVictimBase);
  b.entry("main", "start");
  b.label("start").input(1, "a").input(2, "b").op(BinOp::Eq, 3, R(1), I(0)).label("if_br").br(3, "else_if");
  b.label("block1").compute(3).mov(4, I(1)).jmp("end");
  b.label("else_if").op(BinOp::Eq, 3, R(2), I(0)).label("else_if_br").br(3, "block3");
  b.label("block2").compute(3).mov(4, I(2)).jmp("end");
  b.label("block3").compute(3).mov(4, I(3));
  b.label("end").halt();

  VictimSpec v;
  v.name = "selector";
  v.program = b.build();
  v.secretSchema = {"block"};
  v.leakDescription = "which of the three blocks ran";
  v.lower = [](const Params& p) {
    VictimInput in{p, {}};
    in.input.set("a", toInt(param(p, "a"))).set("b", toInt(param(p, "b")));
    return in;
  };
  v.groundTruth = [](const Params& p) {
    const auto a = toInt(param(p, "a"));
    const auto bb = toInt(param(p, "b"));
    return Leak{{"block", a != 0 ? "1" : bb != 0 ? "2" : "3"}};
  };
  v.leakFromPath = [](const ir::Program& prog, const std::vector<ir::TraceStep>& steps) {
    const VirtualAddress blocks[] = {prog.labelOrThrow("block1"), prog.labelOrThrow("block2"),
                                     prog.labelOrThrow("block3")};
    for (const auto& s : steps) {
      for (int i = 0; i < 3; ++i) {
        if (s.addr == blocks[i]) return Leak{{"block", std::to_string(i + 1)}};
      }
    }
    return Leak{{"block", "?"}};
  };
  v.randomInput = [lower = v.lower](std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(0, 1);
    return lower({{"a", std::to_string(d(rng))}, {"b", std::to_string(d(rng))}});
  };
  return v;
}

std::vector<VictimSpec> corpus() {
  return {buildModexpMontmul(), buildStrtol(), buildLibsvmKernel(), buildApacheLookup(), buildVfprintf()};
}

std::vector<VictimSpec> allVictims() {
  auto v = corpus();
  v.push_back(buildSelector());
  return v;
}

std::vector<std::string> names() {
  return {"modexp", "strtol", "libsvm", "apache", "vfprintf", "selector"};
}

VictimSpec byName(std::string_view name) {
  if (name == "modexp") return buildModexpMontmul();
  if (name == "strtol") return buildStrtol();
  if (name == "libsvm") return buildLibsvmKernel();
  if (name == "apache") return buildApacheLookup();
  if (name == "vfprintf") return buildVfprintf();
  if (name == "selector") return buildSelector();
  throw ConfigError("unknown victim '" + std::string(name) + "'");
}

}  // namespace bshadow::victims
