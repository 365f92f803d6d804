#include <iostream>

#include "sqfit/cli.hpp"

int main(int argc, char** argv) { return sqfit::cli_main(argc, argv, std::cout, std::cerr); }
