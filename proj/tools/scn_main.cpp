#include "scn/cli.hpp"

int main(int argc, char** argv) { return scn::cli::run(argc, argv); }
