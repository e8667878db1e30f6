#include "dmalign/cli.hpp"

int main(int argc, char** argv) { return dmalign::cli::run(argc, argv); }
