#include "hbat/cli.hpp"

int main(int argc, char** argv) { return hbat::run_cli(argc, argv); }
