#include "quzo/cli.hpp"

int main(int argc, char** argv) { return quzo::cli::run(argc, argv); }
