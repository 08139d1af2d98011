#include "step/cli.hpp"

int main(int argc, char** argv) { return step::cli::run(argc, argv); }
