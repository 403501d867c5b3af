// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "rnnsearch/cli.hpp"

int main(int argc, char** argv) { return rnnsearch::cli::run(argc, argv, std::cout, std::cerr); }
