#include "daqe/cli.hpp"

int main(int argc, char** argv) { return daqe::cli::run(argc, argv); }
