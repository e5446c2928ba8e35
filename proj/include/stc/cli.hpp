#pragma once

#include <iostream>

namespace stc {

// Full command-line driver: generate / train-gene / train-contrastive /
// evaluate / embed / report. Returns the process exit code (0 ok, 1 internal
// failure, 2 config error, 3 data error, 4 numeric failure). Streams are
// injectable so tests can capture output.
int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
            std::ostream& err = std::cerr);

}  // namespace stc
