#include "wmhseg/cli.hpp"

int main(int argc, char** argv) { return wmhseg::cli::run(argc, argv); }
