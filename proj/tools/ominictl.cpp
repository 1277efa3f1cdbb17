#include <iostream>

#include "ominictl/cli.hpp"

int main(int argc, char** argv) { return omini::run_cli(argc, argv, std::cout, std::cerr); }
