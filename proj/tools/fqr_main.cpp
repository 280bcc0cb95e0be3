// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#include "fqr/cli.hpp"

int main(int argc, char** argv) { return fqr::cli::run(argc, argv); }
