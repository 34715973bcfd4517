#include "cli.hpp"

int main(int argc, char** argv) { return mlsae::cli::run(argc, argv); }
