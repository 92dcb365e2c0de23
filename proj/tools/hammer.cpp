#include <iostream>

#include "hammer/cli.hpp"

int main(int argc, char** argv) { return hammer::cli::run(argc, argv, std::cout, std::cerr); }
