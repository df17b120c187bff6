#pragma once

// Versioned prompt templates with {NAME} placeholders. The defaults are the
// files under prompts/, compiled in; a directory of same-named files can
// override any subset at run time.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace muse {

class PromptLibrary {
public:
    /// The compiled-in templates.
    static const PromptLibrary& defaults();

    /// Defaults overridden by every `<name>.txt` found in `dir` (and `VERSION`).
    static PromptLibrary load(const std::filesystem::path& dir);

    /// Throws ConfigError for an unknown name.
    [[nodiscard]] const std::string& get(std::string_view name) const;
    [[nodiscard]] const std::string& version() const { return version_; }
    [[nodiscard]] const std::map<std::string, std::string, std::less<>>& all() const { return templates_; }

    void set(std::string name, std::string body);

private:
    std::string version_;
    std::map<std::string, std::string, std::less<>> templates_;
};

/// Substitutes each {KEY} with its value. Throws ConfigError when a key is
/// supplied but its placeholder is absent from the template.
std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

}  // namespace muse
