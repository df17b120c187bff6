#include "muse/gateway.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <thread>

namespace muse {

using nlohmann::json;

std::string_view to_string(FinishReason reason) noexcept {
    switch (reason) {
        case FinishReason::Stop: return "stop";
        case FinishReason::Length: return "length";
        case FinishReason::Error: return "error";
    }
    return "error";
}

namespace {

FinishReason parse_finish_reason(std::string_view s) {
    if (s == "stop") return FinishReason::Stop;
    if (s == "length") return FinishReason::Length;
    return FinishReason::Error;
}

bool tag_matches(std::string_view pattern, std::string_view tag) {
    if (pattern == "*") return true;
    if (!pattern.empty() && pattern.back() == '*') return tag.starts_with(pattern.substr(0, pattern.size() - 1));
    return pattern == tag;
}

std::string first_system(std::span<const ChatMessage> messages) {
    for (const auto& m : messages) {
        if (m.role == MessageRole::System) return m.content;
    }
    return {};
}

}  // namespace

double ScoredContinuation::total_logprob() const noexcept {
    double sum = 0.0;
    for (const auto& t : tokens) sum += t.logprob;
    return sum;
}

std::vector<std::string> mock_tokenize(std::string_view text) { return text::codepoints(text); }

ScoredContinuation Backend::score_continuation(const ScoreRequest&) {
    fail(ErrorKind::UnsupportedCapability, "backend '" + name() + "' does not provide token logprobs");
}

// ---------------------------------------------------------------------------
// Scripts

Script script_from_json(const json& j) {
    Script script;
    const json* entries = &j;
    if (j.is_object()) {
        if (j.contains("uniform_vocab")) {
            const auto v = j.at("uniform_vocab").get<long long>();
            if (v < 1) fail(ErrorKind::ConfigError, "uniform_vocab must be positive");
            script.uniform_vocab = static_cast<std::size_t>(v);
        }
        if (!j.contains("entries")) return script;
        entries = &j.at("entries");
    }
    if (!entries->is_array()) fail(ErrorKind::ConfigError, "script entries must be an array");
    for (const auto& e : *entries) {
        ScriptEntry entry;
        entry.tag = e.value("tag", std::string("*"));
        if (e.contains("contains")) entry.contains = e.at("contains").get<std::string>();
        if (e.contains("system_contains")) entry.system_contains = e.at("system_contains").get<std::string>();
        if (e.contains("logprobs")) {
            entry.kind = ScriptEntry::Kind::Score;
            entry.logprobs = e.at("logprobs").get<std::vector<double>>();
            for (double lp : entry.logprobs) {
                if (!std::isfinite(lp) || lp > 0.0) fail(ErrorKind::ConfigError, "scripted logprobs must be finite and <= 0");
            }
        }
        entry.response = e.value("response", std::string());
        entry.finish_reason = parse_finish_reason(e.value("finish_reason", std::string("stop")));
        entry.transient_failure = e.value("transient_failure", false);
        const auto times = e.value("times", 1LL);
        if (times < 0) fail(ErrorKind::ConfigError, "script entry 'times' must be >= 0");
        entry.times = static_cast<std::size_t>(times);
        script.entries.push_back(std::move(entry));
    }
    return script;
}

json script_to_json(const Script& script) {
    json entries = json::array();
    for (const auto& e : script.entries) {
        json j{{"tag", e.tag}, {"times", e.times}};
        if (e.contains) j["contains"] = *e.contains;
        if (e.system_contains) j["system_contains"] = *e.system_contains;
        if (e.kind == ScriptEntry::Kind::Score) {
            j["logprobs"] = e.logprobs;
        } else {
            j["response"] = e.response;
            if (e.finish_reason != FinishReason::Stop) j["finish_reason"] = std::string(to_string(e.finish_reason));
        }
        if (e.transient_failure) j["transient_failure"] = true;
        entries.push_back(std::move(j));
    }
    json out{{"entries", std::move(entries)}};
    if (script.uniform_vocab) out["uniform_vocab"] = *script.uniform_vocab;
    return out;
}

Script load_script(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open script " + path.string());
    try {
        return script_from_json(json::parse(in));
    } catch (const json::exception& e) {
        fail(ErrorKind::ConfigError, "invalid script " + path.string() + ": " + e.what());
    }
}

ScriptedBackend::ScriptedBackend(Script script, std::string name)
    : name_(std::move(name)), uniform_vocab_(script.uniform_vocab) {
    slots_.reserve(script.entries.size());
    for (auto& e : script.entries) slots_.push_back(Slot{std::move(e), 0});
}

ScriptedBackend::Slot* ScriptedBackend::find(ScriptEntry::Kind kind, std::string_view tag, std::string_view last,
                                             std::string_view system, bool& any_live) {
    any_live = false;
    for (auto& slot : slots_) {
        const auto& e = slot.entry;
        if (e.times != 0 && slot.used >= e.times) continue;
        if (e.kind != kind) continue;
        any_live = true;
        if (!tag_matches(e.tag, tag)) continue;
        if (e.contains && !text::contains(last, *e.contains)) continue;
        if (e.system_contains && !text::contains(system, *e.system_contains)) continue;
        return &slot;
    }
    return nullptr;
}

Completion ScriptedBackend::complete(const CompletionRequest& request) {
    std::lock_guard lock(mutex_);
    const std::string last = request.messages.empty() ? std::string() : request.messages.back().content;
    bool any_live = false;
    Slot* slot = find(ScriptEntry::Kind::Complete, request.tag, last, first_system(request.messages), any_live);
    if (!slot) {
        if (!any_live) fail(ErrorKind::BackendUnavailable, "script '" + name_ + "' is exhausted");
        fail(ErrorKind::ScriptMismatch, "no script entry matches tag '" + request.tag + "'");
    }
    ++slot->used;
    if (slot->entry.transient_failure) {
        throw Error(ErrorKind::BackendUnavailable, "scripted transient failure", /*transient=*/true);
    }
    Completion c;
    c.text = slot->entry.response;
    c.finish_reason = slot->entry.finish_reason;
    std::int64_t prompt_units = 0;
    for (const auto& m : request.messages) prompt_units += static_cast<std::int64_t>(text::codepoint_count(m.content));
    c.usage = Usage{prompt_units, static_cast<std::int64_t>(text::codepoint_count(c.text))};
    return c;
}

ScoredContinuation ScriptedBackend::score_continuation(const ScoreRequest& request) {
    std::lock_guard lock(mutex_);
    bool any_live = false;
    Slot* slot = find(ScriptEntry::Kind::Score, request.tag, request.continuation, first_system(request.prefix), any_live);
    const auto tokens = mock_tokenize(request.continuation);
    ScoredContinuation out;
    if (!slot) {
        if (uniform_vocab_) {
            const double lp = -std::log(static_cast<double>(*uniform_vocab_));
            for (const auto& t : tokens) out.tokens.push_back({t, lp});
            return out;
        }
        if (!any_live) fail(ErrorKind::BackendUnavailable, "script '" + name_ + "' has no scoring entries left");
        fail(ErrorKind::ScriptMismatch, "no scoring entry matches tag '" + request.tag + "'");
    }
    ++slot->used;
    const auto& lps = slot->entry.logprobs;
    for (std::size_t i = 0; i < lps.size(); ++i) {
        out.tokens.push_back({lps.size() == tokens.size() ? tokens[i] : "#" + std::to_string(i), lps[i]});
    }
    return out;
}

std::size_t ScriptedBackend::remaining() const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::count_if(slots_.begin(), slots_.end(), [](const Slot& s) {
        return s.entry.times == 0 || s.used < s.entry.times;
    }));
}

std::shared_ptr<ScriptedBackend> scripted_backend(Script script) {
    if (script.entries.empty() && !script.uniform_vocab) fail(ErrorKind::ConfigError, "script is empty");
    return std::make_shared<ScriptedBackend>(std::move(script));
}

// ---------------------------------------------------------------------------
// Roles

std::string_view to_string(ModelRole role) noexcept {
    switch (role) {
        case ModelRole::Simulator: return "simulator";
        case ModelRole::Assistant: return "assistant";
        case ModelRole::Reasoner: return "reasoner";
        case ModelRole::Judge: return "judge";
        case ModelRole::Reward: return "reward";
    }
    return "simulator";
}

std::optional<ModelRole> parse_model_role(std::string_view name) {
    for (auto r : {ModelRole::Simulator, ModelRole::Assistant, ModelRole::Reasoner, ModelRole::Judge, ModelRole::Reward}) {
        if (to_string(r) == name) return r;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Transcript

Transcript::Transcript(std::filesystem::path path) : path_(std::move(path)) {
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    if (std::filesystem::exists(*path_)) {
        std::ifstream in(*path_);
        std::string line;
        while (std::getline(in, line)) {
            if (text::is_blank(line)) continue;
            json entry;
            try {
                entry = json::parse(line);
            } catch (const json::exception&) {
                // A crash can leave a torn final line.
                spdlog::warn("transcript {}: skipping unreadable line", path_->string());
                continue;
            }
            ++sequence_;
            if (!entry.contains("response") || entry["response"].contains("error")) continue;
            replay_[replay_key(entry.value("tag", std::string()), entry.at("request"))].push_back(entry.at("response"));
        }
    }
    bool torn_tail = false;
    if (std::filesystem::exists(*path_) && std::filesystem::file_size(*path_) > 0) {
        std::ifstream tail(*path_, std::ios::binary);
        tail.seekg(-1, std::ios::end);
        torn_tail = tail.get() != '\n';
    }
    out_.open(*path_, std::ios::app | std::ios::binary);
    if (!out_) fail(ErrorKind::IoError, "cannot open transcript " + path_->string());
    if (torn_tail) out_ << '\n';
}

std::string Transcript::replay_key(std::string_view tag, const json& request) {
    return text::sha256_hex(std::string(tag) + "\n" + request.dump());
}

void Transcript::append(json entry, bool logical_clock) {
    std::lock_guard lock(mutex_);
    if (logical_clock) {
        entry["ts"] = sequence_;
    } else {
        entry["ts"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
    }
    ++sequence_;
    if (out_.is_open()) {
        out_ << entry.dump() << '\n';
        out_.flush();
    }
    entries_.push_back(std::move(entry));
}

std::optional<json> Transcript::take_replay(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = replay_.find(key);
    if (it == replay_.end()) return std::nullopt;
    auto& cursor = replay_cursor_[key];
    if (cursor >= it->second.size()) return std::nullopt;
    ++replay_hits_;
    return it->second[cursor++];
}

std::vector<json> Transcript::entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::size_t Transcript::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::size_t Transcript::replay_hits() const {
    std::lock_guard lock(mutex_);
    return replay_hits_;
}

// ---------------------------------------------------------------------------
// Gateway

json completion_to_json(const Completion& c) {
    return json{{"text", c.text},
                {"finish_reason", std::string(to_string(c.finish_reason))},
                {"usage", {{"prompt_tokens", c.usage.prompt_tokens}, {"completion_tokens", c.usage.completion_tokens}}}};
}

Completion completion_from_json(const json& j) {
    Completion c;
    c.text = j.value("text", std::string());
    c.finish_reason = parse_finish_reason(j.value("finish_reason", std::string("stop")));
    if (j.contains("usage")) {
        c.usage.prompt_tokens = j["usage"].value("prompt_tokens", 0LL);
        c.usage.completion_tokens = j["usage"].value("completion_tokens", 0LL);
    }
    return c;
}

Gateway::Gateway(GatewayOptions options, std::shared_ptr<Transcript> transcript)
    : options_(options),
      transcript_(transcript ? std::move(transcript) : std::make_shared<Transcript>()),
      budget_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(options.max_in_flight, 1, 1024))) {}

void Gateway::bind(ModelRole role, RoleBinding binding) {
    if (!binding.backend) fail(ErrorKind::ConfigError, "null backend for role " + std::string(to_string(role)));
    bindings_[role] = std::move(binding);
}

bool Gateway::has(ModelRole role) const { return bindings_.contains(role); }

const RoleBinding& Gateway::binding(ModelRole role) const {
    auto it = bindings_.find(role);
    if (it == bindings_.end()) fail(ErrorKind::ConfigError, "no backend configured for role " + std::string(to_string(role)));
    return it->second;
}

template <typename Call>
json Gateway::dispatch(ModelRole role, const std::string& tag, const json& request, Call&& call) {
    const auto key = Transcript::replay_key(tag, request);
    if (auto cached = transcript_->take_replay(key)) return *cached;

    const auto& retry = options_.retry;
    for (int attempt = 1;; ++attempt) {
        json response;
        bool ok = false;
        std::optional<Error> error;
        budget_.acquire();
        const auto now = ++in_flight_;
        auto peak = peak_in_flight_.load();
        while (now > peak && !peak_in_flight_.compare_exchange_weak(peak, now)) {
        }
        ++issued_;
        try {
            response = call();
            ok = true;
        } catch (const Error& e) {
            error = e;
        } catch (const std::exception& e) {
            error = Error(ErrorKind::BackendUnavailable, e.what(), true);
        }
        --in_flight_;
        budget_.release();

        if (ok) {
            transcript_->append(json{{"tag", tag}, {"request", request}, {"response", response}, {"attempt", attempt}},
                                options_.logical_clock);
            return response;
        }
        transcript_->append(json{{"tag", tag},
                                 {"request", request},
                                 {"response", {{"error", error->what()}}},
                                 {"attempt", attempt}},
                            options_.logical_clock);
        if (!error->transient()) throw *error;
        if (attempt > retry.max_retries) {
            throw Error(ErrorKind::BackendUnavailable, std::string(to_string(role)) + " backend failed after " +
                                                           std::to_string(attempt) + " attempts: " + error->what());
        }
        const auto delay = std::chrono::duration<double, std::milli>(
            static_cast<double>(retry.base_delay.count()) * std::pow(retry.multiplier, attempt - 1));
        spdlog::debug("{}: attempt {} failed ({}), retrying in {:.0f} ms", tag, attempt, error->what(), delay.count());
        std::this_thread::sleep_for(delay);
    }
}

Completion Gateway::complete(ModelRole role, const CompletionRequest& request) {
    if (request.messages.empty()) fail(ErrorKind::ContractViolation, "completion request has no messages");
    const auto first = request.messages.front().role;
    if (first != MessageRole::System && first != MessageRole::User) {
        fail(ErrorKind::ContractViolation, "first message must be system or user");
    }
    if (request.max_tokens <= 0) fail(ErrorKind::ContractViolation, "max_tokens must be positive");
    if (!(request.temperature >= 0.0)) fail(ErrorKind::ContractViolation, "temperature must be >= 0");
    const auto& bound = binding(role);

    json req{{"kind", "complete"},
             {"role", std::string(to_string(role))},
             {"backend", bound.backend->name()},
             {"messages", messages_to_json(request.messages)},
             {"temperature", request.temperature},
             {"max_tokens", request.max_tokens}};
    if (request.stop) req["stop"] = *request.stop;

    const json response = dispatch(role, request.tag, req, [&] {
        Completion c = bound.backend->complete(request);
        if (c.finish_reason == FinishReason::Stop && c.text.empty()) c.finish_reason = FinishReason::Error;
        return completion_to_json(c);
    });
    return completion_from_json(response);
}

Completion Gateway::chat(ModelRole role, std::vector<ChatMessage> messages, std::string tag) {
    const double temperature = binding(role).temperature;
    return chat(role, std::move(messages), std::move(tag), temperature);
}

Completion Gateway::chat(ModelRole role, std::vector<ChatMessage> messages, std::string tag, double temperature) {
    CompletionRequest req;
    req.messages = std::move(messages);
    req.tag = std::move(tag);
    req.temperature = temperature;
    req.max_tokens = binding(role).max_tokens;
    return complete(role, req);
}

ScoredContinuation Gateway::score(ModelRole role, const ScoreRequest& request) {
    const auto& bound = binding(role);
    if (!bound.backend->supports_logprobs()) {
        fail(ErrorKind::UnsupportedCapability, "backend '" + bound.backend->name() + "' for role " +
                                                   std::string(to_string(role)) + " cannot score continuations");
    }
    json req{{"kind", "score"},
             {"role", std::string(to_string(role))},
             {"backend", bound.backend->name()},
             {"prefix", messages_to_json(request.prefix)},
             {"continuation", request.continuation}};
    const json response = dispatch(role, request.tag, req, [&] {
        const auto scored = bound.backend->score_continuation(request);
        json tokens = json::array();
        for (const auto& t : scored.tokens) {
            if (!std::isfinite(t.logprob) || t.logprob > 0.0) {
                fail(ErrorKind::ContractViolation, "backend returned an invalid logprob");
            }
            tokens.push_back({{"token", t.token}, {"logprob", t.logprob}});
        }
        return json{{"tokens", std::move(tokens)}};
    });
    ScoredContinuation out;
    for (const auto& t : response.at("tokens")) {
        out.tokens.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
    }
    return out;
}

}  // namespace muse
