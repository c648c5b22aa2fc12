#include <iostream>

#include "estf/cli.hpp"

int main(int argc, char** argv) {
    return estf::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
