#pragma once

#include <functional>
#include <iostream>
#include <string_view>

namespace psp {

using WarningSink = std::function<void(std::string_view)>;

// Process-wide warning sink; defaults to stderr. Tests swap it to capture.
inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

}  // namespace psp
