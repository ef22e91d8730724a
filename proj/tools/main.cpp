#include <cstdio>

int main() {
    std::puts("flowsr: cli under construction");
    return 0;
}
