#pragma once

namespace cqf::cli {

// Entry point for the cqfuse binary. Exit codes: 0 success, 1 a check or
// command failed, 2 usage/config error.
int run(int argc, char** argv);

}  // namespace cqf::cli
