#include <iostream>
#include <string>
#include <vector>

#include "sftscope/report.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sftscope::run_cli(args, std::cout, std::cerr);
}
