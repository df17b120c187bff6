#pragma once

// Canonical dialogue, profile and chat-message data model.

#include <nlohmann/json.hpp>

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace muse {

enum class Role { User, Assistant };

enum class Domain {
    GeneralChat,
    CustomerService,
    Medical,
    Legal,
    TechEducation,
    SportsEntertainment,
};

std::string_view to_string(Role role) noexcept;
std::string_view to_string(Domain domain) noexcept;
/// Accepts snake_case ("customer_service") and CamelCase ("CustomerService").
std::optional<Domain> parse_domain(std::string_view name);

struct Utterance {
    Role role = Role::User;
    std::string text;
    /// 0-based index of the (user, assistant) pair that owns this utterance.
    std::size_t turn_index = 0;

    friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// One turn: a user utterance followed by the assistant response.
struct Turn {
    Utterance user;
    Utterance assistant;

    friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueSession {
    std::string id;
    Domain domain = Domain::GeneralChat;
    std::vector<Turn> turns;
    std::map<std::string, std::string> metadata;

    [[nodiscard]] std::size_t turn_count() const noexcept { return turns.size(); }

    friend bool operator==(const DialogueSession&, const DialogueSession&) = default;
};

/// One profile state P_k. `critique` is the critique that produced this
/// profile from P_{k-1}; it is absent for iteration 0.
struct UserProfile {
    std::string id;
    std::string session_id;
    std::size_t iteration = 0;
    std::string text;
    std::optional<std::string> critique;

    friend bool operator==(const UserProfile&, const UserProfile&) = default;
};

enum class MessageRole { System, User, Assistant };

std::string_view to_string(MessageRole role) noexcept;
std::optional<MessageRole> parse_message_role(std::string_view name);

struct ChatMessage {
    MessageRole role = MessageRole::User;
    std::string content;
    /// Turn-opening placeholder for backends that refuse a bare system
    /// prompt. Never written to datasets.
    bool placeholder = false;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct DialogueContext {
    UserProfile profile;
    /// Strictly alternating, begins with a User utterance when non-empty.
    std::vector<Utterance> history;

    friend bool operator==(const DialogueContext&, const DialogueContext&) = default;
};

enum class Perspective { AsUser, AsAssistant };

inline constexpr std::string_view kDefaultAssistantInstruction =
    "You are a helpful assistant. Respond to the user.";

/// Checks every session invariant and returns a whitespace-normalized copy.
/// Throws MalformedSession.
DialogueSession validate_session(DialogueSession raw);

/// Throws MalformedSession on an empty text, a missing critique for k >= 1
/// or a critique on iteration 0.
UserProfile validate_profile(UserProfile profile);

/// History is the first `j` turns flattened; the target user utterance u_j is
/// excluded. Throws IndexOutOfRange unless j < T.
DialogueContext context_at(const DialogueSession& session, const UserProfile& profile, std::size_t j);

/// Flattens turns into an alternating utterance list.
std::vector<Utterance> flatten(std::span<const Turn> turns);

/// Role reversal happens here. AsUser: profile -> System, user utterances ->
/// Assistant, assistant utterances -> User, so a chat backend generates the
/// next user line. AsAssistant: identity mapping under `assistant_instruction`.
std::vector<ChatMessage> render_messages(const DialogueContext& ctx, Perspective perspective,
                                         std::string_view assistant_instruction = kDefaultAssistantInstruction);

/// Human-readable transcript ("User: ...\nAssistant: ...") used inside prompts.
std::string render_transcript(std::span<const Turn> turns);
std::string render_transcript(std::span<const Utterance> utterances);

/// Canonical byte serialization of a message list (used for prompt hashes).
std::string serialize_messages(std::span<const ChatMessage> messages);

// JSON wire formats.
nlohmann::json session_to_json(const DialogueSession& session);
/// Accepts {"turns": [{"user","assistant"}]} or a flat {"messages": [{"role","content"}]}
/// list. Trailing unanswered user utterances are dropped (recorded in
/// metadata["dropped_trailing_user"]). Validates. Throws MalformedSession.
DialogueSession session_from_json(const nlohmann::json& j);

nlohmann::json profile_to_json(const UserProfile& profile);
UserProfile profile_from_json(const nlohmann::json& j);

nlohmann::json message_to_json(const ChatMessage& message);
ChatMessage message_from_json(const nlohmann::json& j);
nlohmann::json messages_to_json(std::span<const ChatMessage> messages);

nlohmann::json utterances_to_json(std::span<const Utterance> utterances);
std::vector<Utterance> utterances_from_json(const nlohmann::json& j);

}  // namespace muse
