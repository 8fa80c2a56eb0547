#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "polypseg/runtime.hpp"

int main(int argc, char** argv) {
  polypseg::tune_allocator();
  doctest::Context context(argc, argv);
  return context.run();
}
