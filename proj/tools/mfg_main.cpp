#include "mfg/cli.hpp"

int main(int argc, char** argv) { return mfg::cli::main_entry(argc, argv); }
