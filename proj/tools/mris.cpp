#include "mris/cli.hpp"

int main(int argc, char** argv) {
  return mris::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
