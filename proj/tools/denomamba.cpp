#include "denomamba/cli.hpp"

int main(int argc, char** argv) { return denomamba::cli::main(argc, argv); }
