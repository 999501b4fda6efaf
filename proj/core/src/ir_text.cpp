#include <cctype>
#include <charconv>
#include <sstream>

#include "bshadow/ir.hpp"

namespace bshadow::ir {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool isIdentStart(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }
bool isIdent(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

bool isIdentifier(std::string_view s) {
  if (s.empty() || !isIdentStart(s.front())) return false;
  for (char c : s) {
    if (!isIdent(c)) return false;
  }
  return true;
}

class LineParser {
 public:
  LineParser(std::string_view text, int line) : text_(text), line_(line) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw AssembleError("line " + std::to_string(line_) + ": " + msg);
  }

  std::vector<std::string_view> splitOperands(std::string_view rest) const {
    std::vector<std::string_view> out;
    rest = trim(rest);
    if (rest.empty()) return out;
    std::size_t start = 0;
    bool inChar = false;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (rest[i] == '\'') inChar = !inChar;
      if (rest[i] == ',' && !inChar) {
        out.push_back(trim(rest.substr(start, i - start)));
        start = i + 1;
      }
    }
    out.push_back(trim(rest.substr(start)));
    for (auto o : out) {
      if (o.empty()) fail("empty operand");
    }
    return out;
  }

  std::optional<std::int64_t> integer(std::string_view s) const {
    if (s.size() == 3 && s.front() == '\'' && s.back() == '\'') return static_cast<unsigned char>(s[1]);
    bool neg = false;
    if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
      neg = s.front() == '-';
      s.remove_prefix(1);
    }
    int base = 10;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
      base = 16;
      s.remove_prefix(2);
    }
    if (s.empty()) return std::nullopt;
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
    const auto sv = static_cast<std::int64_t>(v);
    return neg ? -sv : sv;
  }

  Reg reg(std::string_view s) const {
    if (s == "rt") return kReservedReg;
    if (s.size() >= 2 && s[0] == 'r') {
      int n = -1;
      auto [p, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), n);
      if (ec == std::errc{} && p == s.data() + s.size() && n >= 0 && n < kNumGeneralRegs) {
        return static_cast<Reg>(n);
      }
    }
    fail("expected register, got '" + std::string(s) + "'");
  }

  ProgramBuilder::SymOperand operand(std::string_view s) const {
    if (s.starts_with('@')) {
      std::string_view rest = s.substr(1);
      if (auto v = integer(rest)) return Operand::addr(VirtualAddress(static_cast<std::uint64_t>(*v)));
      if (!isIdentifier(rest)) fail("bad address operand '" + std::string(s) + "'");
      return ProgramBuilder::SymOperand::labelAddr(std::string(rest));
    }
    if (s == "rt" || (s.size() >= 2 && s[0] == 'r' && std::isdigit(static_cast<unsigned char>(s[1])))) {
      return Operand::reg(reg(s));
    }
    if (auto v = integer(s)) return Operand::imm(*v);
    fail("bad operand '" + std::string(s) + "'");
  }

  ProgramBuilder::Target target(std::string_view s) const {
    if (auto v = integer(s)) return VirtualAddress(static_cast<std::uint64_t>(*v));
    if (!isIdentifier(s)) fail("bad branch target '" + std::string(s) + "'");
    return std::string(s);
  }

  void expectCount(const std::vector<std::string_view>& ops, std::size_t n, std::string_view m) const {
    if (ops.size() != n) {
      fail(std::string(m) + " takes " + std::to_string(n) + " operand(s), got " + std::to_string(ops.size()));
    }
  }

  void instruction(ProgramBuilder& b) const {
    std::string_view t = text_;
    std::size_t sp = 0;
    while (sp < t.size() && !std::isspace(static_cast<unsigned char>(t[sp]))) ++sp;
    const std::string_view m = t.substr(0, sp);
    const auto ops = splitOperands(t.substr(sp));

    if (m == "compute") {
      expectCount(ops, 1, m);
      auto v = integer(ops[0]);
      if (!v || *v <= 0 || *v > 0xFFFFFFFF) fail("compute cost must be a positive integer");
      b.compute(static_cast<std::uint32_t>(*v));
    } else if (m == "in") {
      expectCount(ops, 2, m);
      const auto src = ops[1];
      const auto lb = src.find('[');
      if (lb == std::string_view::npos) {
        if (!isIdentifier(src)) fail("bad input name '" + std::string(src) + "'");
        b.input(reg(ops[0]), std::string(src));
      } else {
        if (src.back() != ']') fail("unterminated input index");
        const auto name = src.substr(0, lb);
        if (!isIdentifier(name)) fail("bad input name '" + std::string(name) + "'");
        auto idx = operand(trim(src.substr(lb + 1, src.size() - lb - 2)));
        if (!idx.label.empty() || idx.operand.kind == Operand::Kind::Addr) fail("input index must be reg or int");
        b.input(reg(ops[0]), std::string(name), idx.operand);
      }
    } else if (m == "br") {
      expectCount(ops, 2, m);
      b.br(reg(ops[0]), target(ops[1]));
    } else if (m == "jmp") {
      expectCount(ops, 1, m);
      b.jmp(target(ops[0]));
    } else if (m == "ijmp") {
      expectCount(ops, 1, m);
      b.ijmp(reg(ops[0]));
    } else if (m == "cmov") {
      expectCount(ops, 3, m);
      b.cmov(reg(ops[0]), reg(ops[1]), target(ops[2]));
    } else if (m == "halt") {
      expectCount(ops, 0, m);
      b.halt();
    } else if (auto op = parseBinOp(m)) {
      if (*op == BinOp::Mov) {
        expectCount(ops, 2, m);
        b.op(*op, reg(ops[0]), operand(ops[1]));
      } else {
        expectCount(ops, 3, m);
        b.op(*op, reg(ops[0]), operand(ops[1]), operand(ops[2]));
      }
    } else {
      fail("unknown mnemonic '" + std::string(m) + "'");
    }
  }

 private:
  std::string_view text_;
  int line_;
};

}  // namespace

Program assemble(std::string_view source) {
  ProgramBuilder b(VirtualAddress{0x10000000});
  bool sawInstruction = false;
  int lineNo = 0;
  std::size_t pos = 0;
  while (pos <= source.size()) {
    auto nl = source.find('\n', pos);
    if (nl == std::string_view::npos) nl = source.size();
    std::string_view line = source.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineNo;

    // strip comment, ignoring '#' inside a char literal
    bool inChar = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '\'') inChar = !inChar;
      if (line[i] == '#' && !inChar) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    LineParser lp(line, lineNo);

    if (line.front() == '.') {
      std::istringstream in{std::string(line)};
      std::string dir, a, c, extra;
      in >> dir >> a >> c >> extra;
      if (dir == ".base") {
        if (sawInstruction) lp.fail(".base after first instruction");
        auto v = lp.integer(a);
        if (!v || !c.empty()) lp.fail(".base takes one integer");
        b.setBase(VirtualAddress(static_cast<std::uint64_t>(*v)));
      } else if (dir == ".entry") {
        if (!isIdentifier(a) || c.empty() || !extra.empty()) lp.fail(".entry takes a name and a target");
        b.entry(a, lp.target(c));
      } else {
        lp.fail("unknown directive '" + dir + "'");
      }
      continue;
    }

    while (true) {
      const auto colon = line.find(':');
      if (colon == std::string_view::npos) break;
      const auto name = trim(line.substr(0, colon));
      if (!isIdentifier(name)) break;
      b.label(std::string(name));
      line = trim(line.substr(colon + 1));
    }
    if (line.empty()) continue;
    LineParser(line, lineNo).instruction(b);
    sawInstruction = true;
  }
  return b.build();
}

namespace {

std::string operandText(const Operand& op, const std::map<VirtualAddress, std::string>& names) {
  switch (op.kind) {
    case Operand::Kind::Reg: return regName(static_cast<Reg>(op.value));
    case Operand::Kind::Imm: return std::to_string(op.value);
    case Operand::Kind::Addr: {
      const VirtualAddress a(static_cast<std::uint64_t>(op.value));
      if (auto it = names.find(a); it != names.end()) return "@" + it->second;
      return "@" + toHex(a);
    }
  }
  return "?";
}

std::string targetText(VirtualAddress a, const std::map<VirtualAddress, std::string>& names) {
  if (auto it = names.find(a); it != names.end()) return it->second;
  return toHex(a);
}

}  // namespace

std::string print(const Program& program) {
  std::map<VirtualAddress, std::string> names;
  std::multimap<VirtualAddress, std::string> allLabels;
  // Source labels read best; generated index labels (zz.L<n>) worst.
  const auto rank = [](const std::string& n) { return n.starts_with("zz.L") ? 2 : n.starts_with("zz.") ? 1 : 0; };
  for (const auto& [name, addr] : program.labels()) {
    auto [it, fresh] = names.emplace(addr, name);
    if (!fresh && rank(name) < rank(it->second)) it->second = name;
    allLabels.emplace(addr, name);
  }

  std::ostringstream out;
  out << ".base " << toHex(program.base()) << "\n";
  for (const auto& [name, addr] : program.entries()) {
    out << ".entry " << name << " " << targetText(addr, names) << "\n";
  }
  for (std::size_t i = 0; i <= program.size(); ++i) {
    const VirtualAddress here = program.addressOf(i);
    auto [lo, hi] = allLabels.equal_range(here);
    for (auto it = lo; it != hi; ++it) out << it->second << ":\n";
    if (i == program.size()) break;

    out << "  ";
    const Instruction& instr = program.at(i);
    if (const auto* c = std::get_if<Compute>(&instr)) {
      out << "compute " << c->cost;
    } else if (const auto* s = std::get_if<SetReg>(&instr)) {
      if (const auto* e = std::get_if<Expr>(&s->source)) {
        out << toString(e->op) << " " << regName(s->dst) << ", " << operandText(e->lhs, names);
        if (e->op != BinOp::Mov) out << ", " << operandText(e->rhs, names);
      } else {
        const auto& in = std::get<InputRef>(s->source);
        out << "in " << regName(s->dst) << ", " << in.name << "[" << operandText(in.index, names) << "]";
      }
    } else if (const auto* br = std::get_if<CondBranch>(&instr)) {
      out << "br " << regName(br->predicate) << ", " << targetText(br->target, names);
    } else if (const auto* j = std::get_if<Jump>(&instr)) {
      out << "jmp " << targetText(j->target, names);
    } else if (const auto* ij = std::get_if<IndirectJump>(&instr)) {
      out << "ijmp " << regName(ij->reg);
    } else if (const auto* cm = std::get_if<CondMove>(&instr)) {
      out << "cmov " << regName(cm->predicate) << ", " << regName(cm->dest) << ", "
          << targetText(cm->value, names);
    } else {
      out << "halt";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace bshadow::ir
