#include <string>
#include <vector>

#include "pretrain/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return pretrain::run_cli(args);
}
