#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "pointnorm/runtime.hpp"

int main(int argc, char** argv) {
  pointnorm::tune_allocator();
  return pointnorm::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
