// SPDX-License-Identifier: Apache-2.0
#include <bgnn/cli/app.hpp>

int main(int argc, char** argv) { return bgnn::cli::run_cli(argc, argv); }
