#include <iostream>

#include "g2a/cli.hpp"

int main(int argc, char** argv) { return g2a::cli_main(argc, argv, std::cout, std::cerr); }
