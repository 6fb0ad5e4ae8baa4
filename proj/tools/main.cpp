#include "sublayer/cli/app.hpp"

int main(int argc, char** argv) { return sublayer::cli::run_cli(argc, argv); }
