#include "bapgan/cli.hpp"

int main(int argc, char** argv) { return bapgan::run_cli(argc, argv); }
