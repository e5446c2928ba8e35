#include "stc/log.hpp"

#include <iostream>

namespace stc {
namespace {

bool g_verbose = false;
Log::Sink g_sink;

void emit(const std::string& line) {
  if (g_sink) {
    g_sink(line);
  } else {
    std::cerr << line << "\n";
  }
}

}  // namespace

void Log::warn(const std::string& msg) { emit("[warn] " + msg); }

void Log::info(const std::string& msg) {
  if (g_verbose) emit("[info] " + msg);
}

void Log::set_verbose(bool on) { g_verbose = on; }

bool Log::verbose() { return g_verbose; }

void Log::set_sink(Sink sink) { g_sink = std::move(sink); }

}  // namespace stc
