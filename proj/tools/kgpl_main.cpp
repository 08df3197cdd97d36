// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "kgpl/cli.hpp"

int main(int argc, char** argv) {
  return kgpl::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
