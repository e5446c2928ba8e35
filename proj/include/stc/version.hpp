#pragma once

namespace stc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace stc
