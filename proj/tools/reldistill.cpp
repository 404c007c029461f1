#include "reldistill/cli.hpp"

int main(int argc, char** argv) { return rd::cli::run(argc, argv); }
