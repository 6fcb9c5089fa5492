#include <vector>

#include "bmnn/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return bmnn::run_cli(std::move(args));
}
