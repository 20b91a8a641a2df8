#include "corereft/cli.hpp"

int main(int argc, char** argv) { return corereft::cli::run_main(argc, argv); }
