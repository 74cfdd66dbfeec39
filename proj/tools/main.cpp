#include <string>
#include <vector>

#include "roadnav/cli.hpp"

int main(int argc, char** argv) {
  return roadnav::cli::run(std::vector<std::string>(argv, argv + argc));
}
