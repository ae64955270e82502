// CLI entry point; subcommands are implemented in include/uvap/cli.hpp.
#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::puts("uvap: not wired yet");
  return 0;
}
