#pragma once

#include <functional>
#include <string>

namespace stc {

// Minimal logger. warn() always reaches the sink; info() only when verbose.
// Tests may install a capture sink.
class Log {
 public:
  using Sink = std::function<void(const std::string&)>;

  static void warn(const std::string& msg);
  static void info(const std::string& msg);
  static void set_verbose(bool on);
  static bool verbose();
  // Replaces the sink; pass nullptr to restore stderr output.
  static void set_sink(Sink sink);
};

}  // namespace stc
