#include "lafa/cli.hpp"

int main(int argc, char** argv) { return lafa::cli::run(argc, argv); }
