#pragma once

#include <string_view>

namespace contactsense {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Process-wide stderr logger. Plain text by default; one JSON object per
// line when JSON mode is on.
void set_log_level(LogLevel level);
void set_log_json(bool enabled);

void log_message(LogLevel level, std::string_view msg);
inline void log_debug(std::string_view m) { log_message(LogLevel::debug, m); }
inline void log_info(std::string_view m) { log_message(LogLevel::info, m); }
inline void log_warn(std::string_view m) { log_message(LogLevel::warn, m); }
inline void log_error(std::string_view m) { log_message(LogLevel::error, m); }

}  // namespace contactsense
