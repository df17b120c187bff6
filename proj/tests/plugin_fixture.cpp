// Line-delimited JSON scorer used by the eval tests.
//   plugin_fixture detector <prob>   {"text"} -> {"prob": <prob>}
//   plugin_fixture embedder          {"text"} -> {"vec": [...]}
// The embedder reads "vec:a,b,c" literally; any other text maps to its
// a-z letter histogram.

#include <nlohmann/json.hpp>

#include <cctype>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using nlohmann::json;

namespace {

std::vector<double> embed(const std::string& text) {
    std::vector<double> v;
    if (text.rfind("vec:", 0) == 0) {
        std::stringstream ss(text.substr(4));
        std::string item;
        while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
        return v;
    }
    v.assign(26, 0.0);
    for (unsigned char c : text) {
        if (std::isalpha(c)) v[std::tolower(c) - 'a'] += 1.0;
    }
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: plugin_fixture detector <prob> | embedder\n";
        return 2;
    }
    const std::string mode = argv[1];
    const double prob = argc > 2 ? std::stod(argv[2]) : 0.5;
    std::string line;
    while (std::getline(std::cin, line)) {
        const auto request = json::parse(line);
        const auto text = request.at("text").get<std::string>();
        json reply;
        if (mode == "detector") {
            reply = {{"prob", prob}};
        } else {
            reply = {{"vec", embed(text)}};
        }
        std::cout << reply.dump() << std::endl;
    }
    return 0;
}
