#include "cli.hpp"

int main(int argc, char** argv) { return bem::cli::run(argc, argv); }
