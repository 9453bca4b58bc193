// SPDX-License-Identifier: Apache-2.0
#include "sepkit/cli.hpp"

int main(int argc, char** argv) { return sepkit::run_cli(argc, argv); }
