#include "ckdsnn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return ckdsnn::run_cli(argc, argv, std::cout, std::cerr); }
