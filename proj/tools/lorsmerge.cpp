// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "lorsmerge/cli.hpp"

int main(int argc, char** argv) { return lors::cli::run_cli(argc, argv, std::cout, std::cerr); }
