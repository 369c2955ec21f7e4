#include <vector>

#include "shbmil/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return shbmil::run_cli(std::move(args));
}
