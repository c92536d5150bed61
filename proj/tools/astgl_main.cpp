#include <vector>

#include "astgl/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return astgl::cli::run(args);
}
