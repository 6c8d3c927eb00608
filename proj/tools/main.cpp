#include "cli.hpp"

int main(int argc, char** argv) { return tsg::cli::run(argc, argv); }
