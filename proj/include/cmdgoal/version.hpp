#pragma once

namespace cmdgoal {
inline constexpr const char* kVersion = "0.1.0";
}
