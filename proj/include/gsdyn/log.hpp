#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

// Minimal leveled logging to stderr. The level comes from GSDYN_LOG_LEVEL
// (error, warn, info, debug); the default is info.
namespace gsdyn::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level parse_level(std::string_view s) {
  if (s == "error") return Level::kError;
  if (s == "warn" || s == "warning") return Level::kWarn;
  if (s == "debug") return Level::kDebug;
  return Level::kInfo;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("GSDYN_LOG_LEVEL");
    return env ? parse_level(env) : Level::kInfo;
  }();
  return level;
}

inline void write(Level level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static std::mutex mu;
  static constexpr const char* kTags[] = {"error", "warn", "info", "debug"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[" << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(const std::string& msg) { write(Level::kError, msg); }
inline void warn(const std::string& msg) { write(Level::kWarn, msg); }
inline void info(const std::string& msg) { write(Level::kInfo, msg); }
inline void debug(const std::string& msg) { write(Level::kDebug, msg); }

}  // namespace gsdyn::log
