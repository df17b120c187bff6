#include "muse/prompts.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <fstream>
#include <sstream>
#include <utility>
#include <vector>

namespace muse {

// Generated from prompts/*.txt at configure time.
namespace embedded {
extern const std::vector<std::pair<std::string, std::string>> kPromptFiles;
extern const char* const kPromptVersion;
}  // namespace embedded

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Template files end with a newline that is not part of the prompt.
std::string strip_final_newline(std::string s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
}

}  // namespace

const PromptLibrary& PromptLibrary::defaults() {
    static const PromptLibrary lib = [] {
        PromptLibrary l;
        l.version_ = text::trim(embedded::kPromptVersion);
        for (const auto& [name, body] : embedded::kPromptFiles) l.templates_[name] = strip_final_newline(body);
        return l;
    }();
    return lib;
}

PromptLibrary PromptLibrary::load(const std::filesystem::path& dir) {
    PromptLibrary lib = defaults();
    if (!std::filesystem::is_directory(dir)) fail(ErrorKind::ConfigError, "prompt directory not found: " + dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto& p = entry.path();
        if (p.filename() == "VERSION") {
            lib.version_ = text::trim(read_file(p));
        } else if (p.extension() == ".txt") {
            lib.templates_[p.stem().string()] = strip_final_newline(read_file(p));
        }
    }
    return lib;
}

const std::string& PromptLibrary::get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) fail(ErrorKind::ConfigError, "unknown prompt template '" + std::string(name) + "'");
    return it->second;
}

void PromptLibrary::set(std::string name, std::string body) { templates_[std::move(name)] = std::move(body); }

std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out(tmpl);
    for (const auto& [key, value] : values) {
        const std::string placeholder = "{" + key + "}";
        auto pos = out.find(placeholder);
        if (pos == std::string::npos) fail(ErrorKind::ConfigError, "template lacks placeholder " + placeholder);
        // Substituted text is never rescanned, so values may contain braces.
        while (pos != std::string::npos) {
            out.replace(pos, placeholder.size(), value);
            pos = out.find(placeholder, pos + value.size());
        }
    }
    return out;
}

}  // namespace muse
