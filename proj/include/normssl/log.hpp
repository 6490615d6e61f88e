#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace normssl {

enum class LogLevel { info, warning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {
inline std::mutex log_mutex;
inline LogLevel min_level = LogLevel::info;
inline LogSink log_sink = [](LogLevel level, std::string_view message) {
  std::cerr << (level == LogLevel::warning ? "[warn] " : "[info] ") << message << '\n';
};
}  // namespace detail

// Replaces the process-wide log sink and returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(detail::log_mutex);
  std::swap(detail::log_sink, sink);
  return sink;
}

// Messages below `level` are dropped.
inline void set_log_level(LogLevel level) {
  std::lock_guard lock(detail::log_mutex);
  detail::min_level = level;
}

inline void log(LogLevel level, std::string_view message) {
  std::lock_guard lock(detail::log_mutex);
  if (level < detail::min_level) return;
  if (detail::log_sink) detail::log_sink(level, message);
}

inline void log_warning(std::string_view message) { log(LogLevel::warning, message); }
inline void log_info(std::string_view message) { log(LogLevel::info, message); }

}  // namespace normssl
