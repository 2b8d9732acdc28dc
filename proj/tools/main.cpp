#include "cqfuse/cli.hpp"

int main(int argc, char** argv) { return cqf::cli::run(argc, argv); }
