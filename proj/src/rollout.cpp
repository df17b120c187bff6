#include "muse/rollout.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <numeric>

namespace muse {

using nlohmann::json;

std::string_view to_string(Termination t) noexcept {
    switch (t) {
        case Termination::TurnLimit: return "turn_limit";
        case Termination::ContextBudget: return "context_budget";
        case Termination::EmptyGeneration: return "empty_generation";
        case Termination::UserStop: return "user_stop";
    }
    return "turn_limit";
}

std::optional<Termination> parse_termination(std::string_view s) {
    for (auto t : {Termination::TurnLimit, Termination::ContextBudget, Termination::EmptyGeneration, Termination::UserStop}) {
        if (to_string(t) == s) return t;
    }
    return std::nullopt;
}

void validate_limits(const RolloutLimits& limits) {
    if (limits.max_turns == 0) fail(ErrorKind::ContractViolation, "max_turns must be positive");
    if (limits.max_context_units == 0) fail(ErrorKind::ContractViolation, "max_context_units must be positive");
}

json dialogue_to_json(const SimulatedDialogue& d) {
    json turns = json::array();
    for (const auto& t : d.turns) turns.push_back({{"user", t.user.text}, {"assistant", t.assistant.text}});
    return json{{"id", d.id},
                {"profile_id", d.profile_id},
                {"turns", std::move(turns)},
                {"termination", std::string(to_string(d.termination))},
                {"user_prompt_hashes", d.user_prompt_hashes}};
}

SimulatedDialogue dialogue_from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::FormatError, "dialogue record is not an object");
    SimulatedDialogue d;
    d.id = j.value("id", std::string());
    d.profile_id = j.value("profile_id", std::string());
    const auto& turns = j.at("turns");
    for (std::size_t i = 0; i < turns.size(); ++i) {
        d.turns.push_back(Turn{Utterance{Role::User, turns[i].at("user").get<std::string>(), i},
                               Utterance{Role::Assistant, turns[i].at("assistant").get<std::string>(), i}});
    }
    const auto term = parse_termination(j.value("termination", std::string("turn_limit")));
    if (!term) fail(ErrorKind::FormatError, "unknown termination reason");
    d.termination = *term;
    if (j.contains("user_prompt_hashes")) d.user_prompt_hashes = j.at("user_prompt_hashes").get<std::vector<std::string>>();
    return d;
}

std::string user_prompt_hash(const UserProfile& profile, std::span<const Utterance> history) {
    const DialogueContext ctx{profile, std::vector<Utterance>(history.begin(), history.end())};
    const auto messages = render_messages(ctx, Perspective::AsUser);
    return text::sha256_hex(serialize_messages(messages));
}

namespace {

std::size_t units_of(const PolicyReply& reply, const std::string& text, const RolloutLimits& limits) {
    if (limits.unit == ContextUnit::Tokens && reply.tokens && *reply.tokens > 0) {
        return static_cast<std::size_t>(*reply.tokens);
    }
    return text::codepoint_count(text);
}

// Removes every occurrence of the stop marker. Returns true if one was present.
bool strip_marker(std::string& text, const std::string& marker) {
    if (marker.empty()) return false;
    bool found = false;
    for (auto pos = text.find(marker); pos != std::string::npos; pos = text.find(marker)) {
        text.erase(pos, marker.size());
        found = true;
    }
    if (found) text = text::trim(text);
    return found;
}

struct Generated {
    std::string text;
    std::size_t units = 0;
};

template <typename Call>
Generated generate(const Call& call, const RolloutLimits& limits) {
    for (std::size_t attempt = 0; attempt <= limits.max_empty_retries; ++attempt) {
        const PolicyReply reply = call();
        auto cleaned = text::trim(reply.text);
        if (!cleaned.empty()) {
            const auto units = units_of(reply, cleaned, limits);
            return Generated{std::move(cleaned), units};
        }
    }
    return {};
}

}  // namespace

SimulatedDialogue run_dialogue(const UserPolicy& user_policy, const AssistantPolicy& assistant_policy,
                               const UserProfile& profile, const RolloutLimits& limits, std::string id) {
    return run_dialogue(user_policy, assistant_policy, profile, limits, std::move(id), BudgetProbe{});
}

SimulatedDialogue run_dialogue(const UserPolicy& user_policy, const AssistantPolicy& assistant_policy,
                               const UserProfile& profile, const RolloutLimits& limits, std::string id,
                               const BudgetProbe& probe) {
    validate_limits(limits);
    SimulatedDialogue out;
    out.id = std::move(id);
    out.profile_id = profile.id;
    out.termination = Termination::TurnLimit;

    std::vector<Utterance> history;
    std::size_t history_units = 0;

    auto finish = [&](Termination t) {
        out.termination = t;
        return out;
    };

    while (out.turns.size() < limits.max_turns) {
        const std::size_t index = out.turns.size();

        // User side.
        if (history_units > limits.max_context_units) return finish(Termination::ContextBudget);
        Generated user;
        try {
            user = generate(
                [&] {
                    if (probe) probe(Role::User, history_units);
                    return user_policy(profile, history);
                },
                limits);
        } catch (const Error&) {
            if (out.turns.empty()) throw;
            return finish(Termination::EmptyGeneration);
        }
        if (user.text.empty()) return finish(Termination::EmptyGeneration);
        const bool stopping = strip_marker(user.text, limits.stop_marker);
        if (stopping && user.text.empty()) return finish(Termination::UserStop);
        if (stopping) user.units = text::codepoint_count(user.text);

        const auto hash = user_prompt_hash(profile, history);
        history.push_back(Utterance{Role::User, user.text, index});
        history_units += user.units;

        // Assistant side.
        if (history_units > limits.max_context_units) return finish(Termination::ContextBudget);
        Generated assistant;
        try {
            assistant = generate(
                [&] {
                    if (probe) probe(Role::Assistant, history_units);
                    return assistant_policy(history);
                },
                limits);
        } catch (const Error&) {
            if (out.turns.empty()) throw;
            return finish(Termination::EmptyGeneration);
        }
        if (assistant.text.empty()) return finish(Termination::EmptyGeneration);
        history.push_back(Utterance{Role::Assistant, assistant.text, index});
        history_units += assistant.units;

        out.turns.push_back(Turn{history[history.size() - 2], history.back()});
        out.user_prompt_hashes.push_back(hash);
        if (stopping) return finish(Termination::UserStop);
    }
    return finish(Termination::TurnLimit);
}

UserPolicy gateway_user_policy(Gateway& gateway, ModelRole role, std::string tag) {
    const double temperature = gateway.binding(role).temperature;
    return gateway_user_policy(gateway, role, std::move(tag), temperature);
}

UserPolicy gateway_user_policy(Gateway& gateway, ModelRole role, std::string tag, double temperature) {
    return [&gateway, role, tag = std::move(tag), temperature](const UserProfile& profile,
                                                              std::span<const Utterance> history) {
        const DialogueContext ctx{profile, std::vector<Utterance>(history.begin(), history.end())};
        const auto completion = gateway.chat(role, render_messages(ctx, Perspective::AsUser), tag, temperature);
        PolicyReply reply{completion.text, std::nullopt};
        if (completion.usage.completion_tokens > 0) reply.tokens = completion.usage.completion_tokens;
        return reply;
    };
}

AssistantPolicy gateway_assistant_policy(Gateway& gateway, ModelRole role, std::string instruction, std::string tag) {
    return [&gateway, role, instruction = std::move(instruction), tag = std::move(tag)](std::span<const Utterance> history) {
        const DialogueContext ctx{UserProfile{}, std::vector<Utterance>(history.begin(), history.end())};
        const auto completion = gateway.chat(role, render_messages(ctx, Perspective::AsAssistant, instruction), tag);
        PolicyReply reply{completion.text, std::nullopt};
        if (completion.usage.completion_tokens > 0) reply.tokens = completion.usage.completion_tokens;
        return reply;
    };
}

// ---------------------------------------------------------------------------
// Interactive

ChatState start_chat(UserProfile profile, RolloutLimits limits) {
    validate_limits(limits);
    ChatState state;
    state.profile = std::move(profile);
    state.limits = std::move(limits);
    return state;
}

namespace {

std::size_t total_units(const ChatState& s) { return std::accumulate(s.units.begin(), s.units.end(), std::size_t{0}); }

}  // namespace

std::pair<ChatState, std::string> step_interactive(ChatState state, std::string_view human_text,
                                                   const UserPolicy& user_policy) {
    if (state.terminated()) {
        fail(ErrorKind::SessionTerminated, "session already ended (" + std::string(to_string(*state.termination)) + ")");
    }
    const auto& limits = state.limits;
    auto terminate = [&](Termination t) {
        state.termination = t;
        return std::pair<ChatState, std::string>{std::move(state), std::string()};
    };

    if (!state.history.empty()) {
        auto reply = text::trim(human_text);
        if (reply.empty()) fail(ErrorKind::ContractViolation, "assistant reply is empty");
        const std::size_t index = state.history.size() / 2;
        state.units.push_back(text::codepoint_count(reply));
        state.history.push_back(Utterance{Role::Assistant, std::move(reply), index});
        if (state.closing) return terminate(Termination::UserStop);
        if (state.history.size() / 2 >= limits.max_turns) return terminate(Termination::TurnLimit);
    }

    const auto units = total_units(state);
    if (units > limits.max_context_units) return terminate(Termination::ContextBudget);
    Generated user = generate([&] { return user_policy(state.profile, state.history); }, limits);
    if (user.text.empty()) return terminate(Termination::EmptyGeneration);
    const bool stopping = strip_marker(user.text, limits.stop_marker);
    if (stopping && user.text.empty()) return terminate(Termination::UserStop);
    if (stopping) user.units = text::codepoint_count(user.text);

    state.closing = stopping;
    state.user_prompt_hashes.push_back(user_prompt_hash(state.profile, state.history));
    state.units.push_back(user.units);
    state.history.push_back(Utterance{Role::User, user.text, state.history.size() / 2});
    return {std::move(state), std::move(user.text)};
}

SimulatedDialogue chat_to_dialogue(const ChatState& state, std::string id) {
    SimulatedDialogue d;
    d.id = std::move(id);
    d.profile_id = state.profile.id;
    for (std::size_t i = 0; i + 1 < state.history.size(); i += 2) {
        d.turns.push_back(Turn{state.history[i], state.history[i + 1]});
        d.user_prompt_hashes.push_back(state.user_prompt_hashes.at(i / 2));
    }
    d.termination = state.termination.value_or(Termination::UserStop);
    return d;
}

}  // namespace muse
