#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "mvvd: command wiring pending\n");
  return 2;
}
