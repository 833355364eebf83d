#include "closeeb/cli.hpp"

int main(int argc, char** argv) { return closeeb::cli::main(argc, argv); }
