#include <iostream>

#include <torch/torch.h>

#include "dtune/cli.hpp"

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    return dtune::run_cli(argc, argv, std::cout, std::cerr);
}
