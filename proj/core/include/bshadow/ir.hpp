#pragma once

// Toy branch-centric instruction set, program images, and the architectural
// interpreter that defines ground-truth semantics.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "bshadow/common.hpp"

namespace bshadow::ir {

using Reg = std::uint8_t;

inline constexpr int kNumGeneralRegs = 16;
// Register reserved for trampoline targets; source programs never use it.
inline constexpr Reg kReservedReg = 16;
inline constexpr int kNumRegs = 17;

using RegisterFile = std::array<std::int64_t, kNumRegs>;

std::string regName(Reg r);

struct Operand {
  enum class Kind : std::uint8_t { Reg, Imm, Addr };
  Kind kind = Kind::Imm;
  std::int64_t value = 0;

  static Operand reg(Reg r) { return {Kind::Reg, r}; }
  static Operand imm(std::int64_t v) { return {Kind::Imm, v}; }
  static Operand addr(VirtualAddress a) {
    return {Kind::Addr, static_cast<std::int64_t>(a.value)};
  }

  friend bool operator==(const Operand&, const Operand&) = default;
};

enum class BinOp : std::uint8_t { Mov, Add, Sub, Mul, And, Or, Xor, Shl, Shr, Eq, Ne, Lt, Le };

std::string_view toString(BinOp op);
std::optional<BinOp> parseBinOp(std::string_view mnemonic);

struct Expr {
  BinOp op = BinOp::Mov;
  Operand lhs;
  Operand rhs;  // unused for Mov

  friend bool operator==(const Expr&, const Expr&) = default;
};

// Reads element `index` of the named input array.
struct InputRef {
  std::string name;
  Operand index = Operand::imm(0);

  friend bool operator==(const InputRef&, const InputRef&) = default;
};

struct Compute {
  std::uint32_t cost = 1;
  friend bool operator==(const Compute&, const Compute&) = default;
};
struct SetReg {
  Reg dst = 0;
  std::variant<Expr, InputRef> source;
  friend bool operator==(const SetReg&, const SetReg&) = default;
};
// Taken iff the predicate register is non-zero.
struct CondBranch {
  Reg predicate = 0;
  VirtualAddress target;
  friend bool operator==(const CondBranch&, const CondBranch&) = default;
};
struct Jump {
  VirtualAddress target;
  friend bool operator==(const Jump&, const Jump&) = default;
};
struct IndirectJump {
  Reg reg = 0;
  friend bool operator==(const IndirectJump&, const IndirectJump&) = default;
};
// dest := value iff predicate register is non-zero. Never transfers control.
struct CondMove {
  Reg predicate = 0;
  Reg dest = 0;
  VirtualAddress value;
  friend bool operator==(const CondMove&, const CondMove&) = default;
};
struct Halt {
  friend bool operator==(const Halt&, const Halt&) = default;
};

using Instruction =
    std::variant<Compute, SetReg, CondBranch, Jump, IndirectJump, CondMove, Halt>;

std::optional<BranchKind> branchKindOf(const Instruction& instr);
std::optional<VirtualAddress> staticTargetOf(const Instruction& instr);
bool readsOrWrites(const Instruction& instr, Reg r);

struct BranchSite {
  VirtualAddress addr;
  BranchKind kind = BranchKind::Conditional;
  std::optional<VirtualAddress> staticTarget;

  friend bool operator==(const BranchSite&, const BranchSite&) = default;
};

class ProgramBuilder;

// An assembled image: instructions laid out densely from `base` at a fixed
// stride, with resolved targets and named labels/entry points.
class Program {
 public:
  Program() = default;

  VirtualAddress base() const { return base_; }
  VirtualAddress end() const { return addressOf(instructions_.size()); }
  std::size_t size() const { return instructions_.size(); }
  std::span<const Instruction> instructions() const { return instructions_; }
  const Instruction& at(std::size_t index) const { return instructions_.at(index); }

  VirtualAddress addressOf(std::size_t index) const {
    return base_ + static_cast<std::int64_t>(index * kInstructionStride);
  }
  bool contains(VirtualAddress addr) const;
  std::optional<std::size_t> indexOf(VirtualAddress addr) const;

  const std::map<std::string, VirtualAddress, std::less<>>& labels() const { return labels_; }
  const std::map<std::string, VirtualAddress, std::less<>>& entries() const { return entries_; }
  std::optional<VirtualAddress> label(std::string_view name) const;
  VirtualAddress labelOrThrow(std::string_view name) const;
  // Named entry point; "main" falls back to the first instruction.
  VirtualAddress entry(std::string_view name = "main") const;

  const std::vector<BranchSite>& branches() const { return branches_; }
  std::optional<BranchSite> branchAt(VirtualAddress addr) const;

  // Addresses that appear as address operands (potential indirect targets).
  std::vector<VirtualAddress> addressTakenTargets() const;

  bool usesRegister(Reg r) const;

  // Same image shifted to a new base; every in-image address moves with it.
  Program relocated(VirtualAddress newBase) const;

  friend bool operator==(const Program&, const Program&) = default;

 private:
  friend class ProgramBuilder;
  void indexBranches();

  VirtualAddress base_;
  std::vector<Instruction> instructions_;
  std::map<std::string, VirtualAddress, std::less<>> labels_;
  std::map<std::string, VirtualAddress, std::less<>> entries_;
  std::vector<BranchSite> branches_;
};

// Incremental construction with symbolic labels. Targets given as label names
// are resolved in build(); numeric targets must fall inside the image.
class ProgramBuilder {
 public:
  using Target = std::variant<std::string, VirtualAddress>;

  // Operand that may name a label (resolved to its address).
  struct SymOperand {
    Operand operand;
    std::string label;

    SymOperand(Operand op) : operand(op) {}  // NOLINT(google-explicit-constructor)
    static SymOperand labelAddr(std::string name) {
      SymOperand s(Operand::addr(VirtualAddress{}));
      s.label = std::move(name);
      return s;
    }
  };

  explicit ProgramBuilder(VirtualAddress base = VirtualAddress{0x10000000});

  VirtualAddress base() const { return base_; }
  std::size_t size() const { return pending_.size(); }
  VirtualAddress nextAddress() const;

  ProgramBuilder& setBase(VirtualAddress base);
  ProgramBuilder& label(std::string name);
  ProgramBuilder& entry(std::string name, Target where);

  ProgramBuilder& compute(std::uint32_t cost);
  ProgramBuilder& op(BinOp op, Reg dst, SymOperand lhs, SymOperand rhs = Operand::imm(0));
  ProgramBuilder& mov(Reg dst, SymOperand value) { return op(BinOp::Mov, dst, std::move(value)); }
  ProgramBuilder& input(Reg dst, std::string name, Operand index = Operand::imm(0));
  ProgramBuilder& br(Reg predicate, Target target);
  ProgramBuilder& jmp(Target target);
  ProgramBuilder& ijmp(Reg reg);
  ProgramBuilder& cmov(Reg predicate, Reg dest, Target value);
  ProgramBuilder& halt();

  Program build() const;

 private:
  struct Pending {
    Instruction instr;
    std::optional<std::string> target;  // branch target / cmov value label
    std::string lhsLabel;
    std::string rhsLabel;
  };
  ProgramBuilder& push(Pending p);

  VirtualAddress base_;
  std::vector<Pending> pending_;
  std::vector<std::pair<std::string, std::size_t>> labels_;
  std::vector<std::pair<std::string, Target>> entries_;
};

// Parses the IR text format (see docs/ir-format.md).
Program assemble(std::string_view source);
// Prints a program back in the text format; assemble(print(p)) == p.
std::string print(const Program& program);

// Named integer arrays consumed by `in` instructions. Scalars are arrays of
// length one.
class Input {
 public:
  Input() = default;
  Input& set(std::string name, std::vector<std::int64_t> values);
  Input& set(std::string name, std::int64_t value) { return set(std::move(name), std::vector{value}); }

  std::int64_t get(std::string_view name, std::int64_t index) const;
  bool has(std::string_view name) const;
  const std::map<std::string, std::vector<std::int64_t>, std::less<>>& values() const { return values_; }

  friend bool operator==(const Input&, const Input&) = default;

 private:
  std::map<std::string, std::vector<std::int64_t>, std::less<>> values_;
};

struct BranchOutcome {
  bool taken = false;
  VirtualAddress target;  // resolved next address when taken
  friend bool operator==(const BranchOutcome&, const BranchOutcome&) = default;
};

struct TraceStep {
  VirtualAddress addr;
  std::optional<BranchOutcome> branch;
  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct ArchTrace {
  std::vector<TraceStep> steps;
  RegisterFile registers{};
  bool halted = false;
  bool fuelExhausted = false;

  friend bool operator==(const ArchTrace&, const ArchTrace&) = default;
};

// Cycle cost of one instruction, excluding any misprediction penalty.
std::uint32_t instructionCost(const Instruction& instr);

// Single-step architectural execution. The harness drives this to interleave
// victim execution with interrupts.
class Executor {
 public:
  Executor(const Program& program, const Input& input, VirtualAddress entry);
  Executor(const Program& program, const Input& input)
      : Executor(program, input, program.entry()) {}

  bool halted() const { return halted_; }
  VirtualAddress pc() const { return program_->addressOf(pcIndex_); }
  const Instruction& current() const;
  const RegisterFile& registers() const { return regs_; }
  const Program& program() const { return *program_; }

  // Executes the current instruction. Throws ExecError on faults.
  TraceStep step();

 private:
  std::int64_t eval(const Operand& op) const;

  const Program* program_;
  const Input* input_;
  std::size_t pcIndex_ = 0;
  RegisterFile regs_{};
  bool halted_ = false;
};

// Runs until Halt or until `fuel` instructions have executed (flagged).
ArchTrace interpret(const Program& program, const Input& input, std::uint64_t fuel,
                    std::string_view entry = "main");

}  // namespace bshadow::ir
