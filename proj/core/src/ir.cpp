#include "bshadow/ir.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

namespace bshadow {

std::string toHex(VirtualAddress addr) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(addr.value));
  return buf;
}

std::string_view toString(BranchKind kind) {
  switch (kind) {
    case BranchKind::Conditional: return "conditional";
    case BranchKind::Unconditional: return "unconditional";
    case BranchKind::Indirect: return "indirect";
  }
  return "?";
}

}  // namespace bshadow

namespace bshadow::ir {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

constexpr std::array<std::string_view, 13> kOpNames = {
    "mov", "add", "sub", "mul", "and", "or", "xor", "shl", "shr", "eq", "ne", "lt", "le"};

bool operandUses(const Operand& op, Reg r) {
  return op.kind == Operand::Kind::Reg && op.value == r;
}

}  // namespace

std::string regName(Reg r) {
  if (r == kReservedReg) return "rt";
  return "r" + std::to_string(r);
}

std::string_view toString(BinOp op) { return kOpNames[static_cast<std::size_t>(op)]; }

std::optional<BinOp> parseBinOp(std::string_view mnemonic) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == mnemonic) return static_cast<BinOp>(i);
  }
  return std::nullopt;
}

std::optional<BranchKind> branchKindOf(const Instruction& instr) {
  if (std::holds_alternative<CondBranch>(instr)) return BranchKind::Conditional;
  if (std::holds_alternative<Jump>(instr)) return BranchKind::Unconditional;
  if (std::holds_alternative<IndirectJump>(instr)) return BranchKind::Indirect;
  return std::nullopt;
}

std::optional<VirtualAddress> staticTargetOf(const Instruction& instr) {
  if (const auto* b = std::get_if<CondBranch>(&instr)) return b->target;
  if (const auto* j = std::get_if<Jump>(&instr)) return j->target;
  return std::nullopt;
}

bool readsOrWrites(const Instruction& instr, Reg r) {
  return std::visit(
      Overloaded{
          [](const Compute&) { return false; },
          [&](const SetReg& s) {
            if (s.dst == r) return true;
            return std::visit(Overloaded{[&](const Expr& e) {
                                           return operandUses(e.lhs, r) || operandUses(e.rhs, r);
                                         },
                                         [&](const InputRef& in) { return operandUses(in.index, r); }},
                              s.source);
          },
          [&](const CondBranch& b) { return b.predicate == r; },
          [](const Jump&) { return false; },
          [&](const IndirectJump& j) { return j.reg == r; },
          [&](const CondMove& c) { return c.predicate == r || c.dest == r; },
          [](const Halt&) { return false; },
      },
      instr);
}

std::uint32_t instructionCost(const Instruction& instr) {
  if (const auto* c = std::get_if<Compute>(&instr)) return c->cost;
  return 1;
}

// ---------------------------------------------------------------------------
// Program

bool Program::contains(VirtualAddress addr) const { return indexOf(addr).has_value(); }

std::optional<std::size_t> Program::indexOf(VirtualAddress addr) const {
  if (addr < base_) return std::nullopt;
  const std::uint64_t off = addr.value - base_.value;
  if (off % kInstructionStride != 0) return std::nullopt;
  const std::uint64_t idx = off / kInstructionStride;
  if (idx >= instructions_.size()) return std::nullopt;
  return static_cast<std::size_t>(idx);
}

std::optional<VirtualAddress> Program::label(std::string_view name) const {
  auto it = labels_.find(name);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

VirtualAddress Program::labelOrThrow(std::string_view name) const {
  if (auto a = label(name)) return *a;
  throw AssembleError("unknown label '" + std::string(name) + "'");
}

VirtualAddress Program::entry(std::string_view name) const {
  if (auto it = entries_.find(name); it != entries_.end()) return it->second;
  if (name == "main" && !instructions_.empty()) return base_;
  throw ExecError("unknown entry point '" + std::string(name) + "'");
}

std::optional<BranchSite> Program::branchAt(VirtualAddress addr) const {
  auto it = std::lower_bound(branches_.begin(), branches_.end(), addr,
                             [](const BranchSite& s, VirtualAddress a) { return s.addr < a; });
  if (it != branches_.end() && it->addr == addr) return *it;
  return std::nullopt;
}

std::vector<VirtualAddress> Program::addressTakenTargets() const {
  std::set<VirtualAddress> out;
  for (const auto& instr : instructions_) {
    if (const auto* s = std::get_if<SetReg>(&instr)) {
      if (const auto* e = std::get_if<Expr>(&s->source)) {
        for (const Operand* op : {&e->lhs, &e->rhs}) {
          if (op->kind == Operand::Kind::Addr) {
            VirtualAddress a(static_cast<std::uint64_t>(op->value));
            if (contains(a)) out.insert(a);
          }
        }
      }
    } else if (const auto* c = std::get_if<CondMove>(&instr)) {
      if (contains(c->value)) out.insert(c->value);
    }
  }
  return {out.begin(), out.end()};
}

bool Program::usesRegister(Reg r) const {
  return std::any_of(instructions_.begin(), instructions_.end(),
                     [&](const Instruction& i) { return readsOrWrites(i, r); });
}

void Program::indexBranches() {
  branches_.clear();
  for (std::size_t i = 0; i < instructions_.size(); ++i) {
    if (auto kind = branchKindOf(instructions_[i])) {
      branches_.push_back({addressOf(i), *kind, staticTargetOf(instructions_[i])});
    }
  }
}

Program Program::relocated(VirtualAddress newBase) const {
  const std::int64_t delta = newBase - base_;
  const auto shift = [&](VirtualAddress a) { return contains(a) ? a + delta : a; };
  const auto shiftOp = [&](Operand op) {
    if (op.kind == Operand::Kind::Addr) {
      op.value = static_cast<std::int64_t>(shift(VirtualAddress(static_cast<std::uint64_t>(op.value))).value);
    }
    return op;
  };

  Program out = *this;
  out.base_ = newBase;
  for (auto& instr : out.instructions_) {
    std::visit(Overloaded{
                   [&](SetReg& s) {
                     if (auto* e = std::get_if<Expr>(&s.source)) {
                       e->lhs = shiftOp(e->lhs);
                       e->rhs = shiftOp(e->rhs);
                     }
                   },
                   [&](CondBranch& b) { b.target = shift(b.target); },
                   [&](Jump& j) { j.target = shift(j.target); },
                   [&](CondMove& c) { c.value = shift(c.value); },
                   [](auto&) {},
               },
               instr);
  }
  for (auto& [name, addr] : out.labels_) addr = addr + delta;
  for (auto& [name, addr] : out.entries_) addr = addr + delta;
  out.indexBranches();
  return out;
}

// ---------------------------------------------------------------------------
// ProgramBuilder

ProgramBuilder::ProgramBuilder(VirtualAddress base) : base_(base) {}

VirtualAddress ProgramBuilder::nextAddress() const {
  return base_ + static_cast<std::int64_t>(pending_.size() * kInstructionStride);
}

ProgramBuilder& ProgramBuilder::setBase(VirtualAddress base) {
  base_ = base;
  return *this;
}

ProgramBuilder& ProgramBuilder::label(std::string name) {
  labels_.emplace_back(std::move(name), pending_.size());
  return *this;
}

ProgramBuilder& ProgramBuilder::entry(std::string name, Target where) {
  entries_.emplace_back(std::move(name), std::move(where));
  return *this;
}

ProgramBuilder& ProgramBuilder::push(Pending p) {
  pending_.push_back(std::move(p));
  return *this;
}

ProgramBuilder& ProgramBuilder::compute(std::uint32_t cost) {
  if (cost == 0) throw AssembleError("compute cost must be positive");
  return push({Compute{cost}, std::nullopt, {}, {}});
}

ProgramBuilder& ProgramBuilder::op(BinOp op, Reg dst, SymOperand lhs, SymOperand rhs) {
  return push({SetReg{dst, Expr{op, lhs.operand, rhs.operand}}, std::nullopt, std::move(lhs.label),
               std::move(rhs.label)});
}

ProgramBuilder& ProgramBuilder::input(Reg dst, std::string name, Operand index) {
  return push({SetReg{dst, InputRef{std::move(name), index}}, std::nullopt, {}, {}});
}

namespace {
std::pair<VirtualAddress, std::optional<std::string>> splitTarget(const ProgramBuilder::Target& t) {
  if (const auto* s = std::get_if<std::string>(&t)) return {VirtualAddress{}, *s};
  return {std::get<VirtualAddress>(t), std::nullopt};
}
}  // namespace

ProgramBuilder& ProgramBuilder::br(Reg predicate, Target target) {
  auto [addr, lbl] = splitTarget(target);
  return push({CondBranch{predicate, addr}, lbl, {}, {}});
}

ProgramBuilder& ProgramBuilder::jmp(Target target) {
  auto [addr, lbl] = splitTarget(target);
  return push({Jump{addr}, lbl, {}, {}});
}

ProgramBuilder& ProgramBuilder::ijmp(Reg reg) { return push({IndirectJump{reg}, std::nullopt, {}, {}}); }

ProgramBuilder& ProgramBuilder::cmov(Reg predicate, Reg dest, Target value) {
  auto [addr, lbl] = splitTarget(value);
  return push({CondMove{predicate, dest, addr}, lbl, {}, {}});
}

ProgramBuilder& ProgramBuilder::halt() { return push({Halt{}, std::nullopt, {}, {}}); }

Program ProgramBuilder::build() const {
  Program p;
  p.base_ = base_;
  if (base_.value % kInstructionStride != 0) {
    throw AssembleError("base " + toHex(base_) + " is not instruction-aligned");
  }
  for (const auto& [name, index] : labels_) {
    if (index > pending_.size()) throw AssembleError("label '" + name + "' past end of image");
    if (!p.labels_.emplace(name, p.addressOf(index)).second) {
      throw AssembleError("duplicate label '" + name + "'");
    }
  }
  const auto resolve = [&](const std::string& name) {
    auto it = p.labels_.find(name);
    if (it == p.labels_.end()) throw AssembleError("unresolved label '" + name + "'");
    return it->second;
  };
  for (const auto& [name, where] : entries_) {
    const auto* lbl = std::get_if<std::string>(&where);
    const VirtualAddress a = lbl ? resolve(*lbl) : std::get<VirtualAddress>(where);
    if (!p.entries_.emplace(name, a).second) {
      throw AssembleError("duplicate entry '" + name + "'");
    }
  }

  p.instructions_.reserve(pending_.size());
  for (const auto& pend : pending_) {
    Instruction instr = pend.instr;
    if (pend.target) {
      const VirtualAddress a = resolve(*pend.target);
      std::visit(Overloaded{[&](CondBranch& b) { b.target = a; }, [&](Jump& j) { j.target = a; },
                            [&](CondMove& c) { c.value = a; }, [](auto&) {}},
                 instr);
    }
    if (auto* s = std::get_if<SetReg>(&instr)) {
      if (auto* e = std::get_if<Expr>(&s->source)) {
        if (!pend.lhsLabel.empty()) e->lhs = Operand::addr(resolve(pend.lhsLabel));
        if (!pend.rhsLabel.empty()) e->rhs = Operand::addr(resolve(pend.rhsLabel));
      }
    }
    p.instructions_.push_back(std::move(instr));
  }

  for (const auto& [name, a] : p.entries_) {
    if (!p.contains(a)) throw AssembleError("entry '" + name + "' is outside the image");
  }
  for (std::size_t i = 0; i < p.instructions_.size(); ++i) {
    const auto& instr = p.instructions_[i];
    if (auto t = staticTargetOf(instr); t && !p.contains(*t)) {
      throw AssembleError("branch target " + toHex(*t) + " at " + toHex(p.addressOf(i)) +
                          " is outside the image");
    }
    if (const auto* c = std::get_if<CondMove>(&instr); c && !p.contains(c->value)) {
      throw AssembleError("cmov value " + toHex(c->value) + " at " + toHex(p.addressOf(i)) +
                          " is outside the image");
    }
  }
  p.indexBranches();
  return p;
}

// ---------------------------------------------------------------------------
// Input

Input& Input::set(std::string name, std::vector<std::int64_t> values) {
  values_[std::move(name)] = std::move(values);
  return *this;
}

bool Input::has(std::string_view name) const { return values_.find(name) != values_.end(); }

std::int64_t Input::get(std::string_view name, std::int64_t index) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ExecError("missing input '" + std::string(name) + "'");
  if (index < 0 || static_cast<std::size_t>(index) >= it->second.size()) {
    throw ExecError("input '" + std::string(name) + "' index " + std::to_string(index) +
                    " out of range");
  }
  return it->second[static_cast<std::size_t>(index)];
}

// ---------------------------------------------------------------------------
// Executor

Executor::Executor(const Program& program, const Input& input, VirtualAddress entry)
    : program_(&program), input_(&input) {
  auto idx = program.indexOf(entry);
  if (!idx) throw ExecError("entry " + toHex(entry) + " is outside the image");
  pcIndex_ = *idx;
}

const Instruction& Executor::current() const {
  if (pcIndex_ >= program_->size()) throw ExecError("execution fell off the end of the image");
  return program_->at(pcIndex_);
}

std::int64_t Executor::eval(const Operand& op) const {
  switch (op.kind) {
    case Operand::Kind::Reg: return regs_[static_cast<std::size_t>(op.value)];
    case Operand::Kind::Imm:
    case Operand::Kind::Addr: return op.value;
  }
  return 0;
}

namespace {
std::int64_t apply(BinOp op, std::int64_t a, std::int64_t b) {
  const auto ua = static_cast<std::uint64_t>(a);
  const auto ub = static_cast<std::uint64_t>(b);
  switch (op) {
    case BinOp::Mov: return a;
    case BinOp::Add: return static_cast<std::int64_t>(ua + ub);
    case BinOp::Sub: return static_cast<std::int64_t>(ua - ub);
    case BinOp::Mul: return static_cast<std::int64_t>(ua * ub);
    case BinOp::And: return a & b;
    case BinOp::Or: return a | b;
    case BinOp::Xor: return a ^ b;
    case BinOp::Shl: return static_cast<std::int64_t>(ua << (ub & 63));
    case BinOp::Shr: return static_cast<std::int64_t>(ua >> (ub & 63));
    case BinOp::Eq: return a == b;
    case BinOp::Ne: return a != b;
    case BinOp::Lt: return a < b;
    case BinOp::Le: return a <= b;
  }
  return 0;
}
}  // namespace

TraceStep Executor::step() {
  if (halted_) throw ExecError("step after halt");
  const Instruction& instr = current();
  const VirtualAddress here = program_->addressOf(pcIndex_);
  TraceStep out{here, std::nullopt};
  std::size_t next = pcIndex_ + 1;

  std::visit(Overloaded{
                 [](const Compute&) {},
                 [&](const SetReg& s) {
                   regs_[s.dst] = std::visit(
                       Overloaded{[&](const Expr& e) { return apply(e.op, eval(e.lhs), eval(e.rhs)); },
                                  [&](const InputRef& in) { return input_->get(in.name, eval(in.index)); }},
                       s.source);
                 },
                 [&](const CondBranch& b) {
                   const bool taken = regs_[b.predicate] != 0;
                   out.branch = BranchOutcome{taken, taken ? b.target : program_->addressOf(next)};
                   if (taken) next = *program_->indexOf(b.target);
                 },
                 [&](const Jump& j) {
                   out.branch = BranchOutcome{true, j.target};
                   next = *program_->indexOf(j.target);
                 },
                 [&](const IndirectJump& j) {
                   const VirtualAddress t(static_cast<std::uint64_t>(regs_[j.reg]));
                   auto idx = program_->indexOf(t);
                   if (!idx) {
                     throw ExecError("indirect jump at " + toHex(here) + " through " + regName(j.reg) +
                                     " to invalid address " + toHex(t));
                   }
                   out.branch = BranchOutcome{true, t};
                   next = *idx;
                 },
                 [&](const CondMove& c) {
                   if (regs_[c.predicate] != 0) regs_[c.dest] = static_cast<std::int64_t>(c.value.value);
                 },
                 [&](const Halt&) { halted_ = true; },
             },
             instr);

  if (!halted_) pcIndex_ = next;
  return out;
}

ArchTrace interpret(const Program& program, const Input& input, std::uint64_t fuel,
                    std::string_view entry) {
  if (fuel == 0) throw ExecError("fuel must be positive");
  Executor ex(program, input, program.entry(entry));
  ArchTrace trace;
  while (!ex.halted()) {
    if (trace.steps.size() >= fuel) {
      trace.fuelExhausted = true;
      break;
    }
    trace.steps.push_back(ex.step());
  }
  trace.halted = ex.halted();
  trace.registers = ex.registers();
  return trace;
}

}  // namespace bshadow::ir
