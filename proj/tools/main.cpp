#include <iostream>
#include <string>
#include <vector>

#include "dstkit/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return dstkit::cli::run(args, std::cout, std::cerr);
}
