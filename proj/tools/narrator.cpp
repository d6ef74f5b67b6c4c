#include "narrator/app.hpp"

int main(int argc, char** argv) { return narrator::app::run(std::vector<std::string>(argv, argv + argc)); }
