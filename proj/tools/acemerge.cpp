#include "acemerge/cli.hpp"

int main(int argc, char** argv) { return acemerge::cli::run(argc, argv); }
