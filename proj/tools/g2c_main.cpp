#include <cstdio>
int main() { std::puts("g2c placeholder"); return 0; }
