#include "quadcv/cli.hpp"

int main(int argc, char** argv) { return quadcv::cli_main(argc, argv); }
