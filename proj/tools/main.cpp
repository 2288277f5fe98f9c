#include <iostream>

#include "modex/cli.hpp"

int main(int argc, char** argv) {
  return modex::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
