#pragma once

// Multi-turn user <-> assistant rollout with turn, context-budget, stop-marker
// and empty-generation termination.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace muse {

enum class Termination { TurnLimit, ContextBudget, EmptyGeneration, UserStop };

std::string_view to_string(Termination t) noexcept;
std::optional<Termination> parse_termination(std::string_view s);

enum class ContextUnit { Characters, Tokens };

struct RolloutLimits {
    std::size_t max_turns = 8;
    /// Budget on the dialogue history fed to any single generation call.
    std::size_t max_context_units = 16000;
    ContextUnit unit = ContextUnit::Characters;
    /// A user utterance containing this marker ends the session. Empty disables.
    std::string stop_marker = "[END]";
    /// Extra attempts after an empty generation before giving up.
    std::size_t max_empty_retries = 1;
};

/// Throws ContractViolation when either limit is zero.
void validate_limits(const RolloutLimits& limits);

struct SimulatedDialogue {
    std::string id;
    std::string profile_id;
    std::vector<Turn> turns;
    Termination termination = Termination::TurnLimit;
    /// Hash of the user-side prompt that produced each user utterance.
    std::vector<std::string> user_prompt_hashes;

    friend bool operator==(const SimulatedDialogue&, const SimulatedDialogue&) = default;
};

nlohmann::json dialogue_to_json(const SimulatedDialogue& d);
SimulatedDialogue dialogue_from_json(const nlohmann::json& j);

struct PolicyReply {
    std::string text;
    /// Backend-reported completion tokens, used in ContextUnit::Tokens mode.
    std::optional<std::int64_t> tokens;
};

/// Generates the next user utterance from the profile and the history so far.
using UserPolicy = std::function<PolicyReply(const UserProfile& profile, std::span<const Utterance> history)>;
/// Generates the assistant reply; `history` ends with the current user utterance.
using AssistantPolicy = std::function<PolicyReply(std::span<const Utterance> history)>;

/// SHA-256 of the serialized AsUser prompt for this (profile, history).
std::string user_prompt_hash(const UserProfile& profile, std::span<const Utterance> history);

/// Alternating generation starting from the user side. Stops on whichever
/// limit trips first and records why. A policy error after at least one
/// complete pair truncates the dialogue with EmptyGeneration; before that it
/// propagates.
SimulatedDialogue run_dialogue(const UserPolicy& user_policy, const AssistantPolicy& assistant_policy,
                               const UserProfile& profile, const RolloutLimits& limits, std::string id = {});

/// Observer invoked before every generation call with the context units
/// about to be consumed. Used by property tests.
using BudgetProbe = std::function<void(Role speaker, std::size_t units)>;

SimulatedDialogue run_dialogue(const UserPolicy& user_policy, const AssistantPolicy& assistant_policy,
                               const UserProfile& profile, const RolloutLimits& limits, std::string id,
                               const BudgetProbe& probe);

// Gateway-backed policies.
UserPolicy gateway_user_policy(Gateway& gateway, ModelRole role, std::string tag);
UserPolicy gateway_user_policy(Gateway& gateway, ModelRole role, std::string tag, double temperature);
AssistantPolicy gateway_assistant_policy(Gateway& gateway, ModelRole role, std::string instruction, std::string tag);

// Interactive mode: a human plays the assistant against the simulated user.
struct ChatState {
    UserProfile profile;
    RolloutLimits limits;
    std::vector<Utterance> history;
    std::vector<std::size_t> units;
    std::vector<std::string> user_prompt_hashes;
    std::optional<Termination> termination;
    /// The last user line carried the stop marker; the session ends after the reply.
    bool closing = false;

    [[nodiscard]] bool terminated() const noexcept { return termination.has_value(); }
};

ChatState start_chat(UserProfile profile, RolloutLimits limits);

/// First step: `human_text` is ignored and the opening user utterance is
/// generated. Later steps append `human_text` as the assistant turn and
/// generate the next user utterance. Returns an empty reply when this step
/// trips a limit. Throws SessionTerminated once the state is terminal.
std::pair<ChatState, std::string> step_interactive(ChatState state, std::string_view human_text,
                                                   const UserPolicy& user_policy);

/// Complete pairs of a chat state as a SimulatedDialogue.
SimulatedDialogue chat_to_dialogue(const ChatState& state, std::string id);

}  // namespace muse
