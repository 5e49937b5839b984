#include "contactsense/log.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <json.hpp>
#include <mutex>
#include <string>

namespace contactsense {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::warn)};
std::atomic<bool> g_json{false};
std::mutex g_mutex;

const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warn: return "warn";
    case LogLevel::error: return "error";
    default: return "off";
  }
}
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
void set_log_json(bool enabled) { g_json = enabled; }

void log_message(LogLevel level, std::string_view msg) {
  if (static_cast<int>(level) < g_level.load()) return;
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char stamp[64];
  std::snprintf(stamp, sizeof stamp, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));

  std::string line;
  if (g_json) {
    nlohmann::ordered_json j;
    j["ts"] = stamp;
    j["level"] = level_name(level);
    j["msg"] = std::string(msg);
    line = j.dump();
  } else {
    line = std::string(stamp) + " [" + level_name(level) + "] " + std::string(msg);
  }
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "%s\n", line.c_str());
}

}  // namespace contactsense
