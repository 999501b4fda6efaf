#include <doctest.h>

#include <set>

#include "bshadow/ir.hpp"
#include "bshadow/victims.hpp"
#include "gen.hpp"

using namespace bshadow;
using namespace bshadow::ir;

namespace {

const char* kSelector = R"(
.entry main start
start:
  in r1, a[0]
  in r2, b[0]
  eq r3, r1, 0
  br r3, else_if      # a == 0
block1:
  compute 3
  jmp end
else_if:
  eq r3, r2, 0
  br r3, block3
block2:
  compute 3
  jmp end
block3:
  compute 3
end:
  halt
)";

std::size_t countKind(const Program& p, BranchKind k) {
  std::size_t n = 0;
  for (const auto& b : p.branches()) n += b.kind == k;
  return n;
}

// Rebuilds `p` with every CondMove expanded into a branch diamond.
Program expandCondMoves(const Program& p) {
  ProgramBuilder b(p.base());
  const auto L = [](std::size_t i) { return "i" + std::to_string(i); };
  for (std::size_t i = 0; i < p.size(); ++i) {
    b.label(L(i));
    const auto& ins = p.at(i);
    const auto tgt = [&](VirtualAddress a) { return L(*p.indexOf(a)); };
    if (const auto* c = std::get_if<CondMove>(&ins)) {
      const std::string set = "set" + std::to_string(i), done = "done" + std::to_string(i);
      b.br(c->predicate, set).jmp(done);
      b.label(set).mov(c->dest, Operand::imm(static_cast<std::int64_t>(c->value.value)));
      b.label(done).compute(1);
    } else if (const auto* br = std::get_if<CondBranch>(&ins)) {
      b.br(br->predicate, tgt(br->target));
    } else if (const auto* j = std::get_if<Jump>(&ins)) {
      b.jmp(tgt(j->target));
    } else if (const auto* s = std::get_if<SetReg>(&ins)) {
      if (const auto* e = std::get_if<Expr>(&s->source)) {
        b.op(e->op, s->dst, e->lhs, e->rhs);
      } else {
        const auto& in = std::get<InputRef>(s->source);
        b.input(s->dst, in.name, in.index);
      }
    } else if (const auto* c2 = std::get_if<Compute>(&ins)) {
      b.compute(c2->cost);
    } else {
      b.halt();
    }
  }
  b.label(L(p.size()));
  b.entry("main", L(*p.indexOf(p.entry())));
  return b.build();
}

}  // namespace

TEST_CASE("assemble: single halt is one instruction at base") {
  const auto p = assemble("halt\n");
  CHECK(p.size() == 1);
  CHECK(p.base() == VirtualAddress{0x10000000});
  CHECK(std::holds_alternative<Halt>(p.at(0)));
  const auto t = interpret(p, {}, 10);
  CHECK(t.steps.size() == 1);
  CHECK(t.halted);
}

TEST_CASE("assemble: if/else-if/else snippet has two conditionals and two jumps") {
  const auto p = assemble(kSelector);
  CHECK(countKind(p, BranchKind::Conditional) == 2);
  CHECK(countKind(p, BranchKind::Unconditional) == 2);
  CHECK(countKind(p, BranchKind::Indirect) == 0);
}

TEST_CASE("interpret: a != 0 runs block1 only") {
  const auto p = assemble(kSelector);
  Input in;
  in.set("a", 1).set("b", 0);
  const auto t = interpret(p, in, 100);
  std::set<VirtualAddress> seen;
  for (const auto& s : t.steps) seen.insert(s.addr);
  CHECK(seen.contains(p.labelOrThrow("block1")));
  CHECK_FALSE(seen.contains(p.labelOrThrow("block2")));
  CHECK_FALSE(seen.contains(p.labelOrThrow("block3")));
}

TEST_CASE("assemble errors") {
  CHECK_THROWS_WITH_AS(assemble("jmp nowhere\nhalt\n"), doctest::Contains("unresolved label"), AssembleError);
  CHECK_THROWS_AS(assemble("a:\na:\nhalt\n"), AssembleError);
  CHECK_THROWS_AS(assemble("jmp 0x20000000\nhalt\n"), AssembleError);
  CHECK_THROWS_AS(assemble("frobnicate r1\n"), AssembleError);
  CHECK_THROWS_AS(assemble("mov r17, 1\n"), AssembleError);
}

TEST_CASE("interpret: fuel exhaustion is flagged") {
  const auto p = assemble("top:\n  jmp top\n");
  const auto t = interpret(p, {}, 50);
  CHECK(t.fuelExhausted);
  CHECK_FALSE(t.halted);
  CHECK(t.steps.size() == 50);
}

TEST_CASE("interpret: indirect jump to a non-instruction address is an error") {
  const auto p = assemble("mov r1, 7\nijmp r1\nhalt\n");
  CHECK_THROWS_AS(interpret(p, {}, 10), ExecError);
}

TEST_CASE("interpret: modexp exponent 1011 gives bit-branch outcomes 1,0,1,1") {
  const auto v = victims::buildModexpMontmul();
  const victims::Params params{{"exponent", "11"}, {"bits", "4"}, {"modulus", "1000003"}, {"base", "12345"}};
  const auto t = interpret(v.program, v.lower(params).input, 100000);
  REQUIRE(t.halted);
  std::string bits;
  for (const auto& s : t.steps) {
    if (s.addr == v.program.labelOrThrow("bit_br")) bits += s.branch->taken ? '1' : '0';
  }
  CHECK(bits == "1011");
  // The accumulator is in Montgomery form; one more REDC gives x^e mod n.
  // Reference value from an independent big-integer pow().
  const auto np = victims::montgomeryNPrime(1000003);
  const auto r5 = static_cast<std::uint64_t>(t.registers[5]);
  CHECK(victims::montgomeryMul(r5, 1, 1000003, np) == 432842);
}

TEST_CASE("print/assemble round-trips the victims and random programs") {
  for (const auto& v : victims::allVictims()) {
    CHECK(assemble(print(v.program)) == v.program);
  }
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    const auto p = gen::randomProgram(rng);
    REQUIRE(assemble(print(p)) == p);
  }
}

TEST_CASE("property: interpretation is deterministic") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto p = gen::randomProgram(rng);
    const auto in = gen::randomInput(rng);
    REQUIRE(interpret(p, in, 1000) == interpret(p, in, 1000));
  }
}

TEST_CASE("property: relocation shifts addresses and keeps outcomes") {
  // Programs that never compute on address values.
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10000; ++i) {
    const auto p = gen::randomProgram(rng, VirtualAddress{0x10000000}, false, false);
    const auto in = gen::randomInput(rng);
    const VirtualAddress nb{0x10000000 + 4 * static_cast<std::uint64_t>(gen::pick(rng, 1, 1 << 20))};
    const auto q = p.relocated(nb);
    const std::int64_t d = static_cast<std::int64_t>(nb.value - p.base().value);
    const auto tp = interpret(p, in, 1000);
    const auto tq = interpret(q, in, 1000);
    REQUIRE(tp.steps.size() == tq.steps.size());
    REQUIRE(tp.halted == tq.halted);
    for (std::size_t k = 0; k < tp.steps.size(); ++k) {
      REQUIRE(tq.steps[k].addr == tp.steps[k].addr + d);
      REQUIRE(tq.steps[k].branch.has_value() == tp.steps[k].branch.has_value());
      if (tp.steps[k].branch) {
        REQUIRE(tq.steps[k].branch->taken == tp.steps[k].branch->taken);
        REQUIRE(tq.steps[k].branch->target == tp.steps[k].branch->target + d);
      }
    }
  }
}

TEST_CASE("property: CondMove equals its branch diamond") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10000; ++i) {
    const auto p = gen::randomProgram(rng, VirtualAddress{0x10000000}, false);
    const auto q = expandCondMoves(p);
    const auto in = gen::randomInput(rng);
    const auto tp = interpret(p, in, 1000);
    const auto tq = interpret(q, in, 1000);
    REQUIRE(tp.halted);
    REQUIRE(tq.halted);
    REQUIRE(tp.registers == tq.registers);
  }
}

TEST_CASE("builder: branch-kind tags agree with instructions and addresses are dense") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 2000; ++i) {
    const auto p = gen::randomProgram(rng);
    for (std::size_t k = 0; k < p.size(); ++k) {
      REQUIRE(p.addressOf(k) == p.base() + static_cast<std::int64_t>(4 * k));
      const auto kind = branchKindOf(p.at(k));
      const auto site = p.branchAt(p.addressOf(k));
      REQUIRE(kind.has_value() == site.has_value());
      if (kind) REQUIRE((site->kind == *kind));
    }
  }
}
