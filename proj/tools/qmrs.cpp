#include "qmrs/cli.hpp"

int main(int argc, char** argv) { return qmrs::cli::run(argc, argv); }
