#include "toponets/cli.hpp"

int main(int argc, char** argv) { return toponets::run_cli(argc, argv); }
