#include <cstdio>

int main() {
  std::puts("mas: subcommands not wired up yet");
  return 1;
}
