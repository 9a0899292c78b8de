#include <iostream>
#include <string>
#include <vector>

#include "overton/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return overton::cli::run(args, std::cout, std::cerr);
}
