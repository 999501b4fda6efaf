#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bshadow {

// Byte-granular code address. Instructions advance by a fixed stride.
struct VirtualAddress {
  std::uint64_t value = 0;

  constexpr VirtualAddress() = default;
  constexpr explicit VirtualAddress(std::uint64_t v) : value(v) {}

  constexpr auto operator<=>(const VirtualAddress&) const = default;

  constexpr VirtualAddress operator+(std::int64_t delta) const {
    return VirtualAddress(value + static_cast<std::uint64_t>(delta));
  }
  constexpr VirtualAddress operator-(std::int64_t delta) const {
    return VirtualAddress(value - static_cast<std::uint64_t>(delta));
  }
  constexpr std::int64_t operator-(VirtualAddress other) const {
    return static_cast<std::int64_t>(value - other.value);
  }
};

inline constexpr std::uint64_t kInstructionStride = 4;

// Offset that makes two addresses agree in their low 31 bits.
inline constexpr std::uint64_t kAliasOffset = std::uint64_t{1} << 31;

std::string toHex(VirtualAddress addr);

enum class BranchKind : std::uint8_t { Conditional, Unconditional, Indirect };

std::string_view toString(BranchKind kind);

// Execution context of the core: the victim enclave or the attacker (OS).
enum class ExecMode : std::uint8_t { Enclave, Attacker };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed program text or unresolved symbols.
class AssembleError : public Error {
 public:
  using Error::Error;
};

// Architectural fault while interpreting a program.
class ExecError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration (unknown names, bad parameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Observations or internal state that contradict each other.
class InconsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace bshadow

template <>
struct std::hash<bshadow::VirtualAddress> {
  std::size_t operator()(bshadow::VirtualAddress a) const noexcept {
    return std::hash<std::uint64_t>{}(a.value);
  }
};
