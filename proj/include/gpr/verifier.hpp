#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gpr/recording.hpp"
#include "gpr/register_map.hpp"

namespace gpr
{

  /// Rule ids:
  ///   R0 file does not decode
  ///   R1 register not in the map
  ///   R2 access direction not permitted by the map
  ///   R3 peak mapped GPU memory over budget
  ///   R4 dump outside the live mappings, or unknown dump id
  ///   R5 I/O descriptor outside the mappings live at end of stream
  ///   R6 unmap of a range that is not mapped
  ///   R7 WaitIrq without a preceding interrupt source
  ///   R8 malformed or overlapping map
  struct Violation
  {
    size_t actionIndex = 0;
    std::string rule;
    std::string message;
    bool operator==(const Violation&) const = default;
  };

  struct VerificationReport
  {
    bool ok = true;
    uint64_t peakGpuMemBytes = 0;
    std::vector<Violation> violations;

    bool has(std::string_view rule) const;
    std::string toText() const;
    std::string toJson() const;
  };

  inline constexpr uint64_t kDefaultMemBudget = 16ull << 20;

  /// Pure static checks over the action stream.
  VerificationReport verify(const Recording& rec, const RegisterMap& map, uint64_t memBudgetBytes = kDefaultMemBudget);

  /// Decode then verify; decode failures become an R0 violation.
  VerificationReport verifyBytes(std::span<const uint8_t> file, const RegisterMap& map,
                                 uint64_t memBudgetBytes = kDefaultMemBudget);

  /// Running maximum of the page-rounded mapped footprint. Throws
  /// gpr::Error on an unmap with no matching live map.
  uint64_t peakGpuMem(const Recording& rec);

}
