#include "relax/cli.hpp"

int main(int argc, char** argv) { return relax::cli::dispatch(argc, argv); }
