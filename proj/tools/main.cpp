#include "darts/cli.hpp"

int main(int argc, char** argv) { return darts::cli::run_cli(argc, argv); }
