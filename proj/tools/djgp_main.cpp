#include "djgp/cli.hpp"

int main(int argc, char** argv) { return djgp::run_cli(argc, argv); }
