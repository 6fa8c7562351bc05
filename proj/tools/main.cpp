#include <iostream>

#include "osev/cli.hpp"

int main(int argc, char** argv) { return osev::cli::run(argc, argv, std::cout, std::cerr); }
