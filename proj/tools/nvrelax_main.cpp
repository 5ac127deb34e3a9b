#include "nvrelax/cli.hpp"

int main(int argc, char** argv) { return nvrelax::cli::run(argc, argv); }
