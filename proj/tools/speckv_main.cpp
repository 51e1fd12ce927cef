#include "speckv/cli.hpp"

int main(int argc, char** argv) { return speckv::cli::run(argc, argv); }
