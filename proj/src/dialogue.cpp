#include "muse/dialogue.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <utility>

namespace muse {

using nlohmann::json;

namespace {

struct DomainName {
    Domain domain;
    std::string_view snake;
    std::string_view camel;
};

constexpr std::array<DomainName, 6> kDomains{{
    {Domain::GeneralChat, "general_chat", "GeneralChat"},
    {Domain::CustomerService, "customer_service", "CustomerService"},
    {Domain::Medical, "medical", "Medical"},
    {Domain::Legal, "legal", "Legal"},
    {Domain::TechEducation, "tech_education", "TechEducation"},
    {Domain::SportsEntertainment, "sports_entertainment", "SportsEntertainment"},
}};

std::string require_string(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_string()) {
        fail(ErrorKind::MalformedSession, std::string("missing string field '") + key + "'");
    }
    return j.at(key).get<std::string>();
}

}  // namespace

std::string_view to_string(Role role) noexcept { return role == Role::User ? "user" : "assistant"; }

std::string_view to_string(Domain domain) noexcept {
    for (const auto& d : kDomains) {
        if (d.domain == domain) return d.snake;
    }
    return "general_chat";
}

std::optional<Domain> parse_domain(std::string_view name) {
    for (const auto& d : kDomains) {
        if (name == d.snake || name == d.camel) return d.domain;
    }
    return std::nullopt;
}

std::string_view to_string(MessageRole role) noexcept {
    switch (role) {
        case MessageRole::System: return "system";
        case MessageRole::User: return "user";
        case MessageRole::Assistant: return "assistant";
    }
    return "user";
}

std::optional<MessageRole> parse_message_role(std::string_view name) {
    if (name == "system") return MessageRole::System;
    if (name == "user") return MessageRole::User;
    if (name == "assistant") return MessageRole::Assistant;
    return std::nullopt;
}

DialogueSession validate_session(DialogueSession raw) {
    if (raw.id.empty()) fail(ErrorKind::MalformedSession, "session id is empty");
    if (raw.turns.empty()) fail(ErrorKind::MalformedSession, "session '" + raw.id + "' has no turns");

    std::vector<bool> seen(raw.turns.size(), false);
    for (std::size_t i = 0; i < raw.turns.size(); ++i) {
        auto& turn = raw.turns[i];
        if (turn.user.role != Role::User || turn.assistant.role != Role::Assistant) {
            fail(ErrorKind::MalformedSession,
                 "session '" + raw.id + "' turn " + std::to_string(i) + " does not alternate user/assistant");
        }
        if (turn.user.turn_index != turn.assistant.turn_index) {
            fail(ErrorKind::MalformedSession,
                 "session '" + raw.id + "' turn " + std::to_string(i) + " has mismatched turn_index");
        }
        const auto idx = turn.user.turn_index;
        if (idx < seen.size() && seen[idx]) {
            fail(ErrorKind::MalformedSession,
                 "session '" + raw.id + "' has duplicate turn_index " + std::to_string(idx));
        }
        if (idx != i) {
            fail(ErrorKind::MalformedSession,
                 "session '" + raw.id + "' turn " + std::to_string(i) + " has turn_index " + std::to_string(idx));
        }
        seen[idx] = true;
        for (auto* u : {&turn.user, &turn.assistant}) {
            u->text = text::trim(u->text);
            if (u->text.empty()) {
                fail(ErrorKind::MalformedSession, "session '" + raw.id + "' turn " + std::to_string(i) + " has an empty " +
                                                      std::string(to_string(u->role)) + " utterance");
            }
        }
    }
    return raw;
}

UserProfile validate_profile(UserProfile profile) {
    if (text::is_blank(profile.text)) fail(ErrorKind::EmptyProfile, "profile '" + profile.id + "' has empty text");
    if (profile.iteration == 0 && profile.critique.has_value()) {
        fail(ErrorKind::MalformedSession, "profile '" + profile.id + "' at iteration 0 carries a critique");
    }
    if (profile.iteration > 0 && (!profile.critique || text::is_blank(*profile.critique))) {
        fail(ErrorKind::MalformedSession, "profile '" + profile.id + "' at iteration " +
                                              std::to_string(profile.iteration) + " lacks a critique");
    }
    return profile;
}

std::vector<Utterance> flatten(std::span<const Turn> turns) {
    std::vector<Utterance> out;
    out.reserve(turns.size() * 2);
    for (const auto& t : turns) {
        out.push_back(t.user);
        out.push_back(t.assistant);
    }
    return out;
}

DialogueContext context_at(const DialogueSession& session, const UserProfile& profile, std::size_t j) {
    if (j >= session.turns.size()) {
        fail(ErrorKind::IndexOutOfRange, "turn " + std::to_string(j) + " out of range for session '" + session.id +
                                             "' with " + std::to_string(session.turns.size()) + " turns");
    }
    return DialogueContext{profile, flatten(std::span(session.turns).first(j))};
}

std::vector<ChatMessage> render_messages(const DialogueContext& ctx, Perspective perspective,
                                         std::string_view assistant_instruction) {
    std::vector<ChatMessage> out;
    out.reserve(ctx.history.size() + 1);
    if (perspective == Perspective::AsUser) {
        out.push_back({MessageRole::System, ctx.profile.text});
        for (const auto& u : ctx.history) {
            out.push_back({u.role == Role::User ? MessageRole::Assistant : MessageRole::User, u.text});
        }
    } else {
        out.push_back({MessageRole::System, std::string(assistant_instruction)});
        for (const auto& u : ctx.history) {
            out.push_back({u.role == Role::User ? MessageRole::User : MessageRole::Assistant, u.text});
        }
    }
    return out;
}

std::string render_transcript(std::span<const Utterance> utterances) {
    std::string out;
    for (const auto& u : utterances) {
        if (!out.empty()) out += '\n';
        out += u.role == Role::User ? "User: " : "Assistant: ";
        out += u.text;
    }
    return out;
}

std::string render_transcript(std::span<const Turn> turns) {
    const auto flat = flatten(turns);
    return render_transcript(std::span<const Utterance>(flat));
}

std::string serialize_messages(std::span<const ChatMessage> messages) { return messages_to_json(messages).dump(); }

json session_to_json(const DialogueSession& session) {
    json turns = json::array();
    for (const auto& t : session.turns) {
        turns.push_back({{"user", t.user.text}, {"assistant", t.assistant.text}});
    }
    return json{{"id", session.id},
                {"domain", std::string(to_string(session.domain))},
                {"turns", std::move(turns)},
                {"metadata", session.metadata}};
}

DialogueSession session_from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::MalformedSession, "session record is not an object");
    DialogueSession s;
    if (j.contains("id") && j.at("id").is_number_integer()) {
        s.id = std::to_string(j.at("id").get<long long>());
    } else {
        s.id = require_string(j, "id");
    }
    const auto domain_name = j.value("domain", std::string("general_chat"));
    const auto domain = parse_domain(domain_name);
    if (!domain) fail(ErrorKind::MalformedSession, "session '" + s.id + "' has unknown domain '" + domain_name + "'");
    s.domain = *domain;
    if (j.contains("metadata")) {
        if (!j.at("metadata").is_object()) fail(ErrorKind::MalformedSession, "metadata must be an object");
        for (const auto& [k, v] : j.at("metadata").items()) {
            s.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
    }

    // Collect a flat alternating list first; both input layouts reduce to it.
    std::vector<std::pair<Role, std::string>> flat;
    if (j.contains("turns")) {
        const auto& turns = j.at("turns");
        if (!turns.is_array()) fail(ErrorKind::MalformedSession, "'turns' must be an array");
        for (std::size_t i = 0; i < turns.size(); ++i) {
            const auto& t = turns[i];
            flat.emplace_back(Role::User, require_string(t, "user"));
            if (t.contains("assistant") && !t.at("assistant").is_null()) {
                flat.emplace_back(Role::Assistant, require_string(t, "assistant"));
            } else if (i + 1 != turns.size()) {
                fail(ErrorKind::MalformedSession, "session '" + s.id + "' turn " + std::to_string(i) +
                                                      " has no assistant response");
            }
        }
    } else if (j.contains("messages")) {
        const auto& msgs = j.at("messages");
        if (!msgs.is_array()) fail(ErrorKind::MalformedSession, "'messages' must be an array");
        for (const auto& m : msgs) {
            const auto role = require_string(m, "role");
            if (role == "system") continue;
            if (role != "user" && role != "assistant") {
                fail(ErrorKind::MalformedSession, "session '" + s.id + "' has unknown role '" + role + "'");
            }
            flat.emplace_back(role == "user" ? Role::User : Role::Assistant, require_string(m, "content"));
        }
    } else {
        fail(ErrorKind::MalformedSession, "session '" + s.id + "' has neither 'turns' nor 'messages'");
    }

    if (!flat.empty() && flat.back().first == Role::User) {
        spdlog::warn("session '{}': dropping trailing unanswered user utterance", s.id);
        s.metadata["dropped_trailing_user"] = flat.back().second;
        flat.pop_back();
    }
    for (std::size_t i = 0; i < flat.size(); ++i) {
        const Role expected = i % 2 == 0 ? Role::User : Role::Assistant;
        if (flat[i].first != expected) {
            fail(ErrorKind::MalformedSession, "session '" + s.id + "' has non-alternating roles at position " +
                                                  std::to_string(i));
        }
    }
    for (std::size_t i = 0; i + 1 < flat.size(); i += 2) {
        const auto idx = i / 2;
        s.turns.push_back(Turn{Utterance{Role::User, flat[i].second, idx},
                               Utterance{Role::Assistant, flat[i + 1].second, idx}});
    }
    return validate_session(std::move(s));
}

json profile_to_json(const UserProfile& p) {
    return json{{"id", p.id},
                {"session_id", p.session_id},
                {"iteration", p.iteration},
                {"text", p.text},
                {"critique", p.critique ? json(*p.critique) : json(nullptr)}};
}

UserProfile profile_from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::MalformedSession, "profile record is not an object");
    UserProfile p;
    p.id = require_string(j, "id");
    p.session_id = require_string(j, "session_id");
    if (!j.contains("iteration") || !j.at("iteration").is_number_integer() || j.at("iteration").get<long long>() < 0) {
        fail(ErrorKind::MalformedSession, "profile '" + p.id + "' has an invalid iteration");
    }
    p.iteration = j.at("iteration").get<std::size_t>();
    p.text = require_string(j, "text");
    if (j.contains("critique") && j.at("critique").is_string()) p.critique = j.at("critique").get<std::string>();
    return validate_profile(std::move(p));
}

json message_to_json(const ChatMessage& m) { return json{{"role", std::string(to_string(m.role))}, {"content", m.content}}; }

ChatMessage message_from_json(const json& j) {
    if (!j.is_object() || !j.contains("role") || !j.contains("content")) {
        fail(ErrorKind::FormatError, "chat message needs 'role' and 'content'");
    }
    const auto role = parse_message_role(j.at("role").get<std::string>());
    if (!role) fail(ErrorKind::FormatError, "unknown chat role '" + j.at("role").get<std::string>() + "'");
    return ChatMessage{*role, j.at("content").get<std::string>()};
}

json messages_to_json(std::span<const ChatMessage> messages) {
    json out = json::array();
    for (const auto& m : messages) {
        if (m.placeholder) continue;
        out.push_back(message_to_json(m));
    }
    return out;
}

json utterances_to_json(std::span<const Utterance> utterances) {
    json out = json::array();
    for (const auto& u : utterances) out.push_back({{"role", std::string(to_string(u.role))}, {"content", u.text}});
    return out;
}

std::vector<Utterance> utterances_from_json(const json& j) {
    if (!j.is_array()) fail(ErrorKind::FormatError, "utterance list must be an array");
    std::vector<Utterance> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto role = j[i].value("role", std::string());
        if (role != "user" && role != "assistant") fail(ErrorKind::FormatError, "utterance role must be user|assistant");
        const Role r = role == "user" ? Role::User : Role::Assistant;
        const Role expected = i % 2 == 0 ? Role::User : Role::Assistant;
        if (r != expected) fail(ErrorKind::FormatError, "utterance list must alternate starting with user");
        out.push_back(Utterance{r, j[i].value("content", std::string()), i / 2});
    }
    return out;
}

}  // namespace muse
