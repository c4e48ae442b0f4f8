#include "nesbs/cli.hpp"

int main(int argc, char** argv) {
    return nesbs::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
