#include "bst/harness.hpp"

int main(int argc, char** argv) { return bst::harness::cli_dispatch(argc, argv); }
