#include "regprompt/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace regprompt::log {

namespace {

std::atomic<Format> g_format{Format::text};
std::atomic<Level> g_min_level{Level::warn};
std::mutex g_mutex;

const char* level_name(Level l) {
    switch (l) {
        case Level::debug: return "debug";
        case Level::info: return "info";
        case Level::warn: return "warn";
        case Level::error: return "error";
    }
    return "?";
}

}  // namespace

void configure(Format format, Level min_level) {
    g_format = format;
    g_min_level = min_level;
}

void event(Level level, std::string_view name, const nlohmann::json& fields) {
    if (level < g_min_level.load()) return;
    std::string line;
    if (g_format.load() == Format::json) {
        nlohmann::json j = fields;
        j["level"] = level_name(level);
        j["event"] = std::string(name);
        line = j.dump();
    } else {
        line = std::string("[") + level_name(level) + "] " + std::string(name);
        for (const auto& [key, value] : fields.items()) line += " " + key + "=" + value.dump();
    }
    std::lock_guard lock(g_mutex);
    std::cerr << line << '\n';
}

}  // namespace regprompt::log
