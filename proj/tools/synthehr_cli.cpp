#include <iostream>

#include "synthehr/cli.hpp"

int main(int argc, char** argv) { return synthehr::run_cli(argc, argv, std::cout, std::cerr); }
