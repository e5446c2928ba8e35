#include "stc/cli.hpp"

int main(int argc, char** argv) { return stc::run_cli(argc, argv); }
