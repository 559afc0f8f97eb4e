#include "mno/cli.hpp"

int main(int argc, char** argv) { return mno::run(argc, argv); }
