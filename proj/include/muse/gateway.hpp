#pragma once

// Uniform access to chat-completion backends: a deterministic scripted mock,
// an OpenAI-compatible HTTP client, retries, a concurrency budget and an
// append-only JSONL transcript that doubles as a replay cache for resume.

#include "muse/dialogue.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

namespace muse {

enum class FinishReason { Stop, Length, Error };

std::string_view to_string(FinishReason reason) noexcept;

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
};

struct CompletionRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 512;
    std::optional<std::vector<std::string>> stop;
    /// Pipeline stage label, e.g. "ipse.step1.user".
    std::string tag;
};

struct Completion {
    std::string text;
    FinishReason finish_reason = FinishReason::Stop;
    Usage usage;
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;
};

struct ScoredContinuation {
    std::vector<TokenLogprob> tokens;

    [[nodiscard]] double total_logprob() const noexcept;
};

struct ScoreRequest {
    std::vector<ChatMessage> prefix;
    std::string continuation;
    std::string tag;
};

/// Tokenization used by the mock backends: one token per UTF-8 code point.
std::vector<std::string> mock_tokenize(std::string_view text);

class Backend {
public:
    virtual ~Backend() = default;

    [[nodiscard]] virtual std::string name() const = 0;
    virtual Completion complete(const CompletionRequest& request) = 0;
    [[nodiscard]] virtual bool supports_logprobs() const { return false; }
    /// Throws UnsupportedCapability unless overridden.
    virtual ScoredContinuation score_continuation(const ScoreRequest& request);
};

// ---------------------------------------------------------------------------
// Scripted backend

struct ScriptEntry {
    enum class Kind { Complete, Score };

    Kind kind = Kind::Complete;
    /// Exact tag, a prefix ending in '*', or "*" for any tag.
    std::string tag = "*";
    /// Substring of the last message (completions) or of the continuation (scores).
    std::optional<std::string> contains;
    /// Substring of the first System message.
    std::optional<std::string> system_contains;
    std::string response;
    std::vector<double> logprobs;
    FinishReason finish_reason = FinishReason::Stop;
    /// Raise a transient BackendUnavailable instead of answering.
    bool transient_failure = false;
    /// Number of calls this entry answers; 0 means unlimited.
    std::size_t times = 1;
};

struct Script {
    std::vector<ScriptEntry> entries;
    /// When set, score requests with no matching entry get a uniform
    /// distribution: every token scores ln(1/V).
    std::optional<std::size_t> uniform_vocab;
};

Script script_from_json(const nlohmann::json& j);
nlohmann::json script_to_json(const Script& script);
Script load_script(const std::filesystem::path& path);

/// Deterministic backend. Each call consumes the first matching entry.
/// No remaining entries at all -> BackendUnavailable; entries remain but none
/// match -> ScriptMismatch. Thread-safe.
class ScriptedBackend final : public Backend {
public:
    explicit ScriptedBackend(Script script, std::string name = "scripted");

    [[nodiscard]] std::string name() const override { return name_; }
    Completion complete(const CompletionRequest& request) override;
    [[nodiscard]] bool supports_logprobs() const override { return true; }
    ScoredContinuation score_continuation(const ScoreRequest& request) override;

    /// Entries that can still answer at least one call.
    [[nodiscard]] std::size_t remaining() const;

private:
    struct Slot {
        ScriptEntry entry;
        std::size_t used = 0;
    };

    Slot* find(ScriptEntry::Kind kind, std::string_view tag, std::string_view last, std::string_view system,
               bool& any_live);

    std::string name_;
    std::vector<Slot> slots_;
    std::optional<std::size_t> uniform_vocab_;
    mutable std::mutex mutex_;
};

std::shared_ptr<ScriptedBackend> scripted_backend(Script script);

// ---------------------------------------------------------------------------
// HTTP backend (OpenAI-compatible chat-completions wire protocol)

struct HttpBackendOptions {
    /// e.g. "http://localhost:8000/v1"
    std::string base_url;
    std::string model;
    /// Environment variable holding the bearer token; empty disables auth.
    std::string api_key_env;
    int timeout_seconds = 120;
    /// Enables score_continuation through /completions with echo + logprobs.
    bool logprobs = false;
    /// Sent as a user message when a request would otherwise end on the system prompt.
    std::string opening_prompt = "(The conversation begins. Say your first line.)";
};

class HttpBackend final : public Backend {
public:
    explicit HttpBackend(HttpBackendOptions options);

    [[nodiscard]] std::string name() const override;
    Completion complete(const CompletionRequest& request) override;
    [[nodiscard]] bool supports_logprobs() const override { return options_.logprobs; }
    ScoredContinuation score_continuation(const ScoreRequest& request) override;

    /// Plain-text prompt used for logprob scoring: one "role: content" line per message.
    static std::string render_score_prompt(std::span<const ChatMessage> prefix);

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

    HttpBackendOptions options_;
    std::string origin_;
    std::string path_prefix_;
};

// ---------------------------------------------------------------------------
// Gateway

/// The model roles the pipeline addresses; each may map to a different backend.
enum class ModelRole { Simulator, Assistant, Reasoner, Judge, Reward };

std::string_view to_string(ModelRole role) noexcept;
std::optional<ModelRole> parse_model_role(std::string_view name);

struct RoleBinding {
    std::shared_ptr<Backend> backend;
    double temperature = 0.0;
    int max_tokens = 1024;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds base_delay{200};
    double multiplier = 2.0;
};

struct GatewayOptions {
    std::size_t max_in_flight = 4;
    RetryPolicy retry;
    /// Stamp transcript entries with a sequence number instead of wall time,
    /// so scripted runs produce byte-identical transcripts.
    bool logical_clock = true;
};

/// Append-only JSONL transcript. When opened on an existing file, its
/// successful entries become a replay cache keyed by (tag, request).
class Transcript {
public:
    Transcript() = default;
    explicit Transcript(std::filesystem::path path);

    Transcript(const Transcript&) = delete;
    Transcript& operator=(const Transcript&) = delete;

    /// Serializes and appends; stamps "ts" from the logical or wall clock.
    void append(nlohmann::json entry, bool logical_clock);
    /// Pops the oldest cached response recorded for this key, if any.
    std::optional<nlohmann::json> take_replay(const std::string& key);

    [[nodiscard]] std::vector<nlohmann::json> entries() const;
    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t replay_hits() const;
    [[nodiscard]] const std::optional<std::filesystem::path>& path() const { return path_; }

    static std::string replay_key(std::string_view tag, const nlohmann::json& request);

private:
    mutable std::mutex mutex_;
    std::optional<std::filesystem::path> path_;
    std::ofstream out_;
    std::vector<nlohmann::json> entries_;
    std::map<std::string, std::vector<nlohmann::json>> replay_;
    std::map<std::string, std::size_t> replay_cursor_;
    std::size_t sequence_ = 0;
    std::size_t replay_hits_ = 0;
};

class Gateway {
public:
    explicit Gateway(GatewayOptions options = {}, std::shared_ptr<Transcript> transcript = nullptr);

    void bind(ModelRole role, RoleBinding binding);
    [[nodiscard]] bool has(ModelRole role) const;
    /// Throws ConfigError when the role is unbound.
    [[nodiscard]] const RoleBinding& binding(ModelRole role) const;

    /// Validates, dispatches with retries under the concurrency budget, and
    /// transcribes every attempt. ContractViolation is raised before dispatch.
    Completion complete(ModelRole role, const CompletionRequest& request);

    /// complete() with temperature and max_tokens taken from the role binding.
    Completion chat(ModelRole role, std::vector<ChatMessage> messages, std::string tag);
    /// chat() at an explicit temperature.
    Completion chat(ModelRole role, std::vector<ChatMessage> messages, std::string tag, double temperature);

    ScoredContinuation score(ModelRole role, const ScoreRequest& request);

    [[nodiscard]] Transcript& transcript() { return *transcript_; }
    [[nodiscard]] const GatewayOptions& options() const { return options_; }
    /// Backend attempts actually issued (replayed calls excluded).
    [[nodiscard]] std::size_t issued() const { return issued_.load(); }
    [[nodiscard]] std::size_t peak_in_flight() const { return peak_in_flight_.load(); }

private:
    template <typename Call>
    nlohmann::json dispatch(ModelRole role, const std::string& tag, const nlohmann::json& request, Call&& call);

    GatewayOptions options_;
    std::shared_ptr<Transcript> transcript_;
    std::map<ModelRole, RoleBinding> bindings_;
    std::counting_semaphore<1024> budget_;
    std::atomic<std::size_t> issued_{0};
    std::atomic<std::size_t> in_flight_{0};
    std::atomic<std::size_t> peak_in_flight_{0};
};

nlohmann::json completion_to_json(const Completion& completion);
Completion completion_from_json(const nlohmann::json& j);

}  // namespace muse
