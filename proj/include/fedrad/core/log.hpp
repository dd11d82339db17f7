#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace fedrad {

/// Library-wide logger on stderr. Level comes from FEDRAD_LOG
/// (error|warn|info|debug), default warn.
inline spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_color_mt("fedrad");
    l->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    spdlog::level::level_enum lvl = spdlog::level::warn;
    if (const char* env = std::getenv("FEDRAD_LOG")) {
      const std::string v(env);
      if (v == "error") lvl = spdlog::level::err;
      else if (v == "warn") lvl = spdlog::level::warn;
      else if (v == "info") lvl = spdlog::level::info;
      else if (v == "debug") lvl = spdlog::level::debug;
    }
    l->set_level(lvl);
    return l;
  }();
  return *logger;
}

}  // namespace fedrad
