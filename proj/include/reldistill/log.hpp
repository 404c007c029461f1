#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace rd::log {

enum class Level { quiet = 0, warn = 1, info = 2 };

inline std::atomic<Level>& level() {
    static std::atomic<Level> current{Level::warn};
    return current;
}

inline void warn(std::string_view msg) {
    if (level().load() >= Level::warn) std::cerr << "warning: " << msg << '\n';
}

inline void info(std::string_view msg) {
    if (level().load() >= Level::info) std::cerr << msg << '\n';
}

}  // namespace rd::log
