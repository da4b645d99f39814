#include "geomatt/cli.hpp"

#include <iostream>

int main(int argc, char **argv) { return geomatt::run_cli(argc, argv, std::cout, std::cerr); }
