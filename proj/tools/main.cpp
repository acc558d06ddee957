#include "raproscope/cli.hpp"

int main(int argc, char** argv) { return raproscope::cli_main(argc, argv); }
