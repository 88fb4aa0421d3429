#pragma once

#include <iostream>
#include <string_view>

namespace cmdgoal {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::kWarn;
  return level;
}

inline void log(LogLevel level, std::string_view msg) {
  if (level < log_threshold()) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  std::cerr << "[" << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_info(std::string_view msg) { log(LogLevel::kInfo, msg); }
inline void log_warn(std::string_view msg) { log(LogLevel::kWarn, msg); }

}  // namespace cmdgoal
