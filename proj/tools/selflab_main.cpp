#include "selflab/cli.hpp"

int main(int argc, char** argv) { return selflab::cli_main(argc, argv); }
