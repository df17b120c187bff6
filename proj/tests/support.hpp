#pragma once

#include "muse/dialogue.hpp"
#include "muse/error.hpp"
#include "muse/gateway.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>

namespace testing {

using nlohmann::json;

/// Kind of the muse::Error thrown by fn; throws std::logic_error if nothing is thrown.
inline muse::ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const muse::Error& e) {
        return e.kind();
    }
    throw std::logic_error("expected a muse::Error");
}

inline muse::DialogueSession make_session(const std::string& id, std::size_t turns,
                                          muse::Domain domain = muse::Domain::GeneralChat) {
    muse::DialogueSession s;
    s.id = id;
    s.domain = domain;
    for (std::size_t i = 0; i < turns; ++i) {
        s.turns.push_back({{muse::Role::User, "user line " + std::to_string(i) + " of " + id, i},
                           {muse::Role::Assistant, "assistant line " + std::to_string(i) + " of " + id, i}});
    }
    return s;
}

inline muse::UserProfile make_profile(const std::string& session_id, const std::string& text = "A terse user.") {
    return muse::UserProfile{session_id + "#p0", session_id, 0, text, std::nullopt};
}

inline muse::GatewayOptions fast_options() {
    muse::GatewayOptions o;
    o.retry.base_delay = std::chrono::milliseconds(0);
    return o;
}

/// Binds every listed role (all roles by default) to one scripted backend.
inline std::unique_ptr<muse::Gateway> scripted_gateway(
    const json& script, std::shared_ptr<muse::Transcript> transcript = nullptr,
    std::initializer_list<muse::ModelRole> roles = {muse::ModelRole::Simulator, muse::ModelRole::Assistant,
                                                    muse::ModelRole::Reasoner, muse::ModelRole::Judge,
                                                    muse::ModelRole::Reward}) {
    auto gw = std::make_unique<muse::Gateway>(fast_options(), std::move(transcript));
    auto backend = muse::scripted_backend(muse::script_from_json(script));
    for (auto r : roles) gw->bind(r, muse::RoleBinding{backend, 0.0, 256});
    return gw;
}

/// Options for an HTTP backend that is never reached in the test.
inline muse::HttpBackendOptions unreachable_http() {
    muse::HttpBackendOptions o;
    o.base_url = "http://127.0.0.1:9/v1";
    o.model = "m";
    return o;
}

class TempDir {
public:
    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "muse-test-XXXXXX").string();
        if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

}  // namespace testing
