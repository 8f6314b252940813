#pragma once

#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>

namespace elpg {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

/// Level read once from ELPG_LOG (debug|info|warn|error); default info.
inline LogLevel log_threshold() {
    static const LogLevel level = [] {
        const char* env = std::getenv("ELPG_LOG");
        if (!env) return LogLevel::kInfo;
        const std::string v(env);
        if (v == "debug") return LogLevel::kDebug;
        if (v == "warn") return LogLevel::kWarn;
        if (v == "error") return LogLevel::kError;
        return LogLevel::kInfo;
    }();
    return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
    if (level < log_threshold()) return;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_debug(const std::string& msg) { log_at(LogLevel::kDebug, "debug", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::kInfo, "info", msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::kWarn, "warn", msg); }
inline void log_error(const std::string& msg) { log_at(LogLevel::kError, "error", msg); }

}  // namespace elpg
