#include <rg/cli.hpp>

int main(int argc, char** argv) { return rg::rglab_main(argc, argv); }
