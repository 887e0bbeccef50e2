#include "moelab/cli.hpp"

int main(int argc, char** argv) { return moelab::cli::run(argc, argv); }
