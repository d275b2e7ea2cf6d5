#include "itercomp/cli.hpp"

int main(int argc, char** argv) { return itercomp::run_cli(argc, argv); }
