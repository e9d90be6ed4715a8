// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "ckptmerge/cli.hpp"

int main(int argc, char** argv) {
    return ckptmerge::run_merge(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
