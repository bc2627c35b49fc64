#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "hapnet/cli.hpp"

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap instead of fresh mmaps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return hapnet::run_cli(args, std::cout, std::cerr);
}
