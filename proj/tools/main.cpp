// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "quad2lin/cli.hpp"

int main(int argc, char** argv) {
  return q2l::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
