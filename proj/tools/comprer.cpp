#include "comprer/cli.hpp"

int main(int argc, char** argv) { return comprer::cli::run(argc, argv); }
