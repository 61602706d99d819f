#include <string>
#include <vector>

#include "archforge/cli.hpp"

int main(int argc, char** argv) {
  return archforge::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
