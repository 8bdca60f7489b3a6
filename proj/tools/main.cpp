#include "cotwatch/cli.hpp"

int main(int argc, char** argv) { return cotwatch::cli::run(argc, argv); }
