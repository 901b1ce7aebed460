#include "cli_app.hpp"

int main(int argc, char** argv) { return stackstop::cli::run(argc, argv); }
