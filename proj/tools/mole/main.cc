// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "commands.h"

int main(int argc, char** argv) { return mole::cli::run(argc, argv, std::cout, std::cerr); }
