#pragma once

#include <iosfwd>

namespace pivl::cli {

// Exit codes: 0 success, 1 validation error (single-line diagnostic, usage
// text for unknown flags), 2 runtime failure.
inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kRuntime = 2;

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pivl::cli
