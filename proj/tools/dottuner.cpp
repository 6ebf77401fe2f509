#include "dottuner/cli.hpp"

int main(int argc, char** argv) {
    return dottuner::run_cli(argc, argv);
}
