#include <string>
#include <vector>

#include "mlae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mlae::cli_main(args);
}
