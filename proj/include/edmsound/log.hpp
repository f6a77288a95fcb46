#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

// Stderr logging; the level comes from EDMSOUND_LOG (quiet, info, debug).
namespace edmsound::log {

enum class Level { kQuiet = 0, kInfo = 1, kDebug = 2 };

inline Level level_from_env() {
  const char* v = std::getenv("EDMSOUND_LOG");
  if (!v) return Level::kInfo;
  const std::string_view s(v);
  if (s == "quiet" || s == "0") return Level::kQuiet;
  if (s == "debug" || s == "2") return Level::kDebug;
  return Level::kInfo;
}

inline Level& current_level() {
  static Level level = level_from_env();
  return level;
}

inline void info(std::string_view msg) {
  if (current_level() >= Level::kInfo) std::cerr << msg << '\n';
}

inline void debug(std::string_view msg) {
  if (current_level() >= Level::kDebug) std::cerr << "[debug] " << msg << '\n';
}

inline void warn(std::string_view msg) { std::cerr << "warning: " << msg << '\n'; }

}  // namespace edmsound::log
