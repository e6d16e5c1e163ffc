#include "gpr/shader.hpp"

#include <cstdio>
#include <stdexcept>

namespace gpr::isa
{

  namespace
  {
    bool usesRb(Op op)
    {
      switch (op)
      {
        case Op::St: case Op::Add: case Op::Sub: case Op::Mul: case Op::Max: return true;
        default: return false;
      }
    }
  }

  std::optional<Decoded> decode(const std::vector<uint32_t>& code, size_t pc)
  {
    if (pc >= code.size())
      return std::nullopt;
    uint32_t w = code[pc];
    uint8_t opc = uint8_t(w >> 24);
    if (opc < uint8_t(Op::Halt) || opc > uint8_t(Op::Bnz))
      return std::nullopt;
    Decoded d{Op(opc), (w >> 20) & 15, (w >> 16) & 15, (w >> 12) & 15, int16_t(w & 0xffff), 1};
    if (d.rd >= kRegisterCount || d.ra >= kRegisterCount)
      return std::nullopt;
    if (usesRb(d.op) && d.rb >= kRegisterCount)
      return std::nullopt;
    if (d.op == Op::Ldi)
    {
      if (pc + 1 >= code.size())
        return std::nullopt;
      d.imm = int32_t(code[pc + 1]);
      d.words = 2;
    }
    return d;
  }

  uint32_t encode(Op op, unsigned rd, unsigned ra, unsigned rb, int32_t imm16)
  {
    if (rd >= kRegisterCount || ra >= kRegisterCount || rb >= kRegisterCount)
      throw std::invalid_argument("register index out of range");
    uint32_t w = uint32_t(op) << 24 | rd << 20 | ra << 16;
    if (usesRb(op))
      w |= rb << 12;
    else
      w |= uint16_t(imm16);
    return w;
  }

  void Assembler::emit(Op op, unsigned rd, unsigned ra, unsigned rb, int32_t imm)
  {
    code_.push_back(encode(op, rd, ra, rb, imm));
  }

  void Assembler::ldi(unsigned rd, uint32_t value)
  {
    emit(Op::Ldi, rd, 0, 0);
    code_.push_back(value);
  }

  void Assembler::addi(unsigned rd, unsigned ra, int32_t imm)
  {
    if (imm < -32768 || imm > 32767)
      throw std::invalid_argument("addi immediate out of range");
    emit(Op::Addi, rd, ra, 0, imm);
  }

  void Assembler::bnz(unsigned ra, size_t target)
  {
    int64_t off = int64_t(target) - int64_t(code_.size() + 1);
    if (off < -32768 || off > 32767)
      throw std::invalid_argument("branch target out of range");
    emit(Op::Bnz, 0, ra, 0, int32_t(off));
  }

  std::string disassemble(const std::vector<uint32_t>& code)
  {
    static const char* names[] = {"?", "halt", "ldi", "ld", "st", "add", "sub", "mul", "max", "addi", "bnz"};
    std::string out;
    char line[96];
    for (size_t pc = 0; pc < code.size();)
    {
      auto d = decode(code, pc);
      if (!d)
      {
        std::snprintf(line, sizeof line, "%4zu  .word 0x%08x\n", pc, code[pc]);
        out += line;
        ++pc;
        continue;
      }
      const char* n = names[unsigned(d->op)];
      switch (d->op)
      {
        case Op::Halt: std::snprintf(line, sizeof line, "%4zu  %s\n", pc, n); break;
        case Op::Ldi: std::snprintf(line, sizeof line, "%4zu  %s r%u, 0x%x\n", pc, n, d->rd, uint32_t(d->imm)); break;
        case Op::Ld: std::snprintf(line, sizeof line, "%4zu  %s r%u, [r%u]\n", pc, n, d->rd, d->ra); break;
        case Op::St: std::snprintf(line, sizeof line, "%4zu  %s [r%u], r%u\n", pc, n, d->ra, d->rb); break;
        case Op::Addi: std::snprintf(line, sizeof line, "%4zu  %s r%u, r%u, %d\n", pc, n, d->rd, d->ra, d->imm); break;
        case Op::Bnz: std::snprintf(line, sizeof line, "%4zu  %s r%u, %+d\n", pc, n, d->ra, d->imm); break;
        default: std::snprintf(line, sizeof line, "%4zu  %s r%u, r%u, r%u\n", pc, n, d->rd, d->ra, d->rb); break;
      }
      out += line;
      pc += d->words;
    }
    return out;
  }

}
