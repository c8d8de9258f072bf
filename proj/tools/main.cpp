#include <iostream>
#include <string>
#include <vector>

#include "vipastain/cli.hpp"

int main(int argc, char** argv) {
    return vipastain::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
