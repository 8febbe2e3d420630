#include <iostream>

#include "mixtrain/cli.hpp"

int main(int argc, char** argv) {
  return mixtrain::cli::run(argc, argv, std::cout, std::cerr);
}
