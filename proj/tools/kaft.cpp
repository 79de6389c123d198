#include "kaft/cli.hpp"

int main(int argc, char** argv) { return kaft::cli::run(argc, argv); }
