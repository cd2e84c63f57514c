#include <iostream>
#include <string>
#include <vector>

#include "kdlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return kdlab::run_cli(args, std::cout, std::cerr);
}
