#include <iostream>

#include "polypseg/cli.hpp"
#include "polypseg/runtime.hpp"

int main(int argc, char** argv) {
  polypseg::tune_allocator();
  return polypseg::run_cli(argc, argv, std::cout, std::cerr);
}
