#include <iostream>

#include "corrdst/cli.hpp"

int main(int argc, char** argv, char** envp) {
    return corrdst::cli::run_main(argc, argv, envp, std::cout, std::cerr);
}
