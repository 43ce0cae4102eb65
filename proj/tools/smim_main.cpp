#include "smim/cli.hpp"

int main(int argc, char** argv) {
    return smim::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
