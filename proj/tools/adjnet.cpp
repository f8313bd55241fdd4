#include "adjnet/cli.hpp"

int main(int argc, char** argv) { return adjnet::cli::dispatch(argc, argv); }
