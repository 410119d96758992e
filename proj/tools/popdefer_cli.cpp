#include <iostream>

int main() {
    std::cout << "popdefer CLI placeholder\n";
    return 0;
}
