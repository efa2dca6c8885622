#include "sdlayer/cli.hpp"

int main(int argc, char** argv) { return sdlayer::cli::main_entry(argc, argv); }
