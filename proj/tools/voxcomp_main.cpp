#include "voxcomp/cli.hpp"

int main(int argc, char** argv) { return voxcomp::dispatch(argc, argv); }
