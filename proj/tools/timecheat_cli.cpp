#include "timecheat/cli.hpp"

int main(int argc, char** argv) { return timecheat::cli::run(argc, argv); }
