#include "stpc/cli.hpp"

int main(int argc, char** argv) { return stpc::run_cli(argc, argv); }
