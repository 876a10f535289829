#include "egopat/commands.hpp"

int main(int argc, char** argv) { return egopat::run_cli(argc, argv); }
