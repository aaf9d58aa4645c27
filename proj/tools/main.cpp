#include "pandagpt/cli.hpp"

int main(int argc, char** argv) { return pgpt::cli_main(argc, argv); }
