#include "ssl_lab/cli.hpp"

int main(int argc, char** argv) { return ssl_lab::run_cli(argc, argv); }
