#include <iostream>

#include "dfpf/cli.hpp"

int main(int argc, char** argv) {
  return dfpf::dispatch(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
