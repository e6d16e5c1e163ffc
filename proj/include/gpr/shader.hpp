#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gpr::isa
{

  /// Micro-ISA executed by the simulated shader cores.
  ///
  /// Word layout: [31:24] opcode, [23:20] rd, [19:16] ra, [15:12] rb,
  /// [15:0] imm16 (signed). LDI is followed by a full 32-bit literal
  /// word. BNZ offsets count words relative to the next instruction.
  /// Opcode 0 is deliberately undefined so zeroed memory never runs.
  enum class Op : uint8_t
  {
    Halt = 0x01,
    Ldi = 0x02,
    Ld = 0x03,
    St = 0x04,
    Add = 0x05,
    Sub = 0x06,
    Mul = 0x07,
    Max = 0x08,
    Addi = 0x09,
    Bnz = 0x0A,
  };

  inline constexpr unsigned kRegisterCount = 8;
  inline constexpr uint64_t kStepBudget = 1ull << 24;
  inline constexpr uint32_t kMaxShaderBytes = 64 * 1024;

  struct Decoded
  {
    Op op;
    unsigned rd = 0, ra = 0, rb = 0;
    int32_t imm = 0;
    unsigned words = 1;
  };

  /// Decode the instruction at @p pc. Returns nullopt for an unknown
  /// opcode, an out-of-range register or a truncated LDI.
  std::optional<Decoded> decode(const std::vector<uint32_t>& code, size_t pc);

  uint32_t encode(Op op, unsigned rd, unsigned ra, unsigned rb, int32_t imm16 = 0);

  /// Tiny assembler with backward labels, enough for the JIT kernels.
  class Assembler
  {
  public:
    size_t here() const { return code_.size(); }

    void halt() { emit(Op::Halt, 0, 0, 0); }
    void ldi(unsigned rd, uint32_t value);
    void ld(unsigned rd, unsigned ra) { emit(Op::Ld, rd, ra, 0); }
    void st(unsigned ra, unsigned rs) { emit(Op::St, 0, ra, rs); }
    void add(unsigned rd, unsigned ra, unsigned rb) { emit(Op::Add, rd, ra, rb); }
    void sub(unsigned rd, unsigned ra, unsigned rb) { emit(Op::Sub, rd, ra, rb); }
    void mul(unsigned rd, unsigned ra, unsigned rb) { emit(Op::Mul, rd, ra, rb); }
    void max(unsigned rd, unsigned ra, unsigned rb) { emit(Op::Max, rd, ra, rb); }
    void addi(unsigned rd, unsigned ra, int32_t imm);
    /// Branch back (or forward) to the absolute word index @p target.
    void bnz(unsigned ra, size_t target);

    const std::vector<uint32_t>& code() const { return code_; }

  private:
    void emit(Op op, unsigned rd, unsigned ra, unsigned rb, int32_t imm = 0);
    std::vector<uint32_t> code_;
  };

  std::string disassemble(const std::vector<uint32_t>& code);

}
