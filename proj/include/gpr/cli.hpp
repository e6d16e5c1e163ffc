#pragma once

#include <ostream>

namespace gpr::cli
{

  inline constexpr int kExitOk = 0;
  inline constexpr int kExitFailure = 1;
  inline constexpr int kExitUsage = 2;

  /// Run one `gpr` invocation. Reports go to @p out, diagnostics to @p err.
  int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}
