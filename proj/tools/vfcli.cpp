#include "varifocal/cli.hpp"

int main(int argc, char** argv) { return vf::cli::run_cli(argc, argv); }
