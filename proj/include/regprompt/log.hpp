#pragma once

#include <string_view>

#include <json.hpp>

namespace regprompt::log {

enum class Format { text, json };
enum class Level { debug, info, warn, error };

/// Process-wide sink configuration; events go to stderr.
void configure(Format format, Level min_level = Level::info);

void event(Level level, std::string_view name, const nlohmann::json& fields = nlohmann::json::object());

inline void info(std::string_view name, const nlohmann::json& fields = nlohmann::json::object()) {
    event(Level::info, name, fields);
}
inline void warn(std::string_view name, const nlohmann::json& fields = nlohmann::json::object()) {
    event(Level::warn, name, fields);
}
inline void debug(std::string_view name, const nlohmann::json& fields = nlohmann::json::object()) {
    event(Level::debug, name, fields);
}

}  // namespace regprompt::log
