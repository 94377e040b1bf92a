#include <iostream>

#include "pivl/cli.hpp"

int main(int argc, char** argv) { return pivl::cli::dispatch(argc, argv, std::cout, std::cerr); }
