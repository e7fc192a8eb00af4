#include <iostream>

#include "painterly/estimator.hpp"

int main() { std::cout << painterly::StyleCategoryTable::builtin().to_json().dump(2) << '\n'; }
