#include "w2s/cli.hpp"

int main(int argc, char** argv) { return w2s::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
