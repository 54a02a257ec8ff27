#include <iostream>

#include "pgunet_cli/cli.hpp"

int main(int argc, char** argv) { return pgu::cli::run_cli(argc, argv, std::cout, std::cerr); }
