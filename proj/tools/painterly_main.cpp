#include "painterly/cli.hpp"

int main(int argc, char** argv) { return painterly::cli::run(argc, argv); }
