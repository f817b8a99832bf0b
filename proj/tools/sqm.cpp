#include "sqm/cli.hpp"

int main(int argc, char** argv) { return sqm::cli::run(argc, argv); }
