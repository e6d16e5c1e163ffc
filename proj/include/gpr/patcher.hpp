#pragma once

#include <cstdint>

#include "gpr/recording.hpp"
#include "gpr/sku.hpp"

namespace gpr
{

  class PatchError : public Error
  {
  public:
    using Error::Error;
  };

  struct PatchResult
  {
    Recording rec;
    /// Register-value edits (GPU_ID, MMU_CONFIG, JOB_AFFINITY) that changed a value.
    uint32_t registerEdits = 0;
    /// Map actions whose PTE permission bits changed.
    uint32_t pteEdits = 0;

  };

  struct PatchOptions
  {
    /// Permit a target with fewer cores (needed to undo an A->B patch).
    bool allowFewerCores = false;
  };

  /// Rewrite a recording made on @p from so it replays on @p to.
  /// Throws PatchError when the recording is not from @p from or @p to has
  /// fewer cores and @p opt does not allow it.
  PatchResult patch(const Recording& rec, const SkuProfile& from, const SkuProfile& to, PatchOptions opt = {});

}
