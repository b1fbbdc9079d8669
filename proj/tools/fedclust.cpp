#include <iostream>

#include "fedclust/cli.hpp"

int main(int argc, char** argv) { return fedclust::cli::run(argc, argv, std::cout, std::cerr); }
