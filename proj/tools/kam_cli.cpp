#include "kam/cli.hpp"

int main(int argc, char** argv) { return kam::cli::main(argc, argv); }
