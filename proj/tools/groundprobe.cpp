#include "groundprobe/cli.hpp"

int main(int argc, char** argv) { return groundprobe::cli::run(argc, argv); }
