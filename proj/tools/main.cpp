#include "dsfwsi/cli.hpp"

int main(int argc, char** argv) { return dsfwsi::dispatch(argc, argv); }
