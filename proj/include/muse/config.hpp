#pragma once

// Run configuration: one TOML file determines a run. String values may use
// ${VAR} environment interpolation; relative paths resolve against the
// config file's directory.

#include "muse/gateway.hpp"
#include "muse/ipse.hpp"
#include "muse/rollout.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace muse {

inline constexpr int kConfigVersion = 1;

struct BackendConfig {
    /// scripted | http | uniform
    std::string kind = "scripted";
    std::filesystem::path script;
    std::string base_url;
    std::string model;
    std::string api_key_env;
    double temperature = 0.0;
    int max_tokens = 1024;
    bool logprobs = false;
    int timeout_seconds = 120;
    /// Vocabulary size of the `uniform` scorer.
    std::size_t vocab = 0;
};

struct RunConfig {
    std::filesystem::path config_path;
    std::filesystem::path base_dir;

    std::map<ModelRole, BackendConfig> backends;
    GatewayOptions gateway;

    std::size_t ipse_rounds = 2;
    ipse::FinalSelection ipse_selection = ipse::FinalSelection::Last;
    std::optional<std::filesystem::path> prompts_dir;

    RolloutLimits rollout;
    std::string assistant_instruction{kDefaultAssistantInstruction};

    bool grpo_enabled = true;
    std::size_t group_size = 4;
    double grpo_eps = 1e-8;

    double rl_fraction = 0.10;
    bool per_domain = false;
    std::array<double, 3> difficulty_weights{1.0, 1.0, 1.0};

    std::vector<std::filesystem::path> corpus;
    std::size_t min_turns = 4;

    std::filesystem::path output_dir = "runs";
    /// Overrides the content-hash run id.
    std::string run_id_override;

    std::string detector_command;
    std::string embedder_command;
    std::optional<double> ava_threshold;

    std::size_t workers = 1;

    /// Normalized settings used for the run id (output location excluded).
    nlohmann::json canonical;
};

/// Throws ConfigError (with the offending key) or IoError.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir);

/// Replaces ${NAME} with the environment value. Throws ConfigError if unset.
std::string interpolate_env(std::string_view s);

/// Hash of the canonical settings plus the contents of every script, corpus
/// and prompt-override file they reference. Independent of output_dir.
std::string compute_run_id(const RunConfig& config);

std::filesystem::path run_directory(const RunConfig& config);

PromptLibrary load_prompts(const RunConfig& config);

/// Binds every configured role. Roles sharing one script file share one
/// scripted backend, so its entries are consumed in call order across roles.
std::unique_ptr<Gateway> build_gateway(const RunConfig& config, std::shared_ptr<Transcript> transcript);

}  // namespace muse
