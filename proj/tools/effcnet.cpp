#include "effcnet/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    effcnet::retain_freed_memory();
    return effcnet::run_cli(argc, argv, std::cout, std::cerr);
}
