#include "muse/ipse.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>

namespace muse::ipse {

using nlohmann::json;

std::string_view to_string(FinalSelection s) noexcept { return s == FinalSelection::Last ? "last" : "ppl"; }

std::optional<FinalSelection> parse_final_selection(std::string_view s) {
    if (s == "last") return FinalSelection::Last;
    if (s == "ppl" || s == "ppl_argmin") return FinalSelection::PplArgmin;
    return std::nullopt;
}

std::string profile_id(std::string_view session_id, std::size_t iteration) {
    return std::string(session_id) + "#p" + std::to_string(iteration);
}

json lineage_to_json(const ProfileLineage& lineage) {
    json profiles = json::array();
    for (const auto& p : lineage.profiles) profiles.push_back(profile_to_json(p));
    json recon = json::array();
    for (const auto& r : lineage.reconstructions) {
        recon.push_back({{"iteration", r.iteration},
                         {"reference_session_id", r.reference_session_id},
                         {"simulated", dialogue_to_json(r.simulated)}});
    }
    json out{{"session_id", lineage.session_id},
             {"profiles", std::move(profiles)},
             {"critiques", lineage.critiques},
             {"final_index", lineage.final_index},
             {"reconstructions", std::move(recon)}};
    if (!lineage.ppl.empty()) out["ppl"] = lineage.ppl;
    return out;
}

ProfileLineage lineage_from_json(const json& j) {
    ProfileLineage l;
    l.session_id = j.at("session_id").get<std::string>();
    for (const auto& p : j.at("profiles")) l.profiles.push_back(profile_from_json(p));
    l.critiques = j.at("critiques").get<std::vector<std::string>>();
    l.final_index = j.at("final_index").get<std::size_t>();
    if (j.contains("reconstructions")) {
        for (const auto& r : j.at("reconstructions")) {
            l.reconstructions.push_back(ReconstructionRecord{r.at("iteration").get<std::size_t>(),
                                                             dialogue_from_json(r.at("simulated")),
                                                             r.at("reference_session_id").get<std::string>()});
        }
    }
    if (j.contains("ppl")) l.ppl = j.at("ppl").get<std::vector<double>>();
    if (l.profiles.empty() || l.critiques.size() + 1 != l.profiles.size() || l.final_index >= l.profiles.size()) {
        fail(ErrorKind::FormatError, "inconsistent lineage for session '" + l.session_id + "'");
    }
    return l;
}

UserProfile extract_initial_profile(const DialogueSession& session, Gateway& gateway, const PromptLibrary& prompts) {
    const auto prompt =
        fill_template(prompts.get("ipse_extract"), {{"REFERENCE_DIALOGUE", render_transcript(std::span(session.turns))}});
    const auto completion = gateway.chat(ModelRole::Reasoner, {ChatMessage{MessageRole::User, prompt}}, tags::kExtract);
    auto body = text::trim(completion.text);
    if (body.empty()) fail(ErrorKind::EmptyProfile, "extraction returned no profile for session '" + session.id + "'");
    return UserProfile{profile_id(session.id, 0), session.id, 0, std::move(body), std::nullopt};
}

ReconstructionRecord simulate_reconstruction(const UserProfile& profile, const DialogueSession& session, Gateway& gateway,
                                             const PromptLibrary& prompts) {
    const auto reference = render_transcript(std::span(session.turns));
    const auto instruction = fill_template(prompts.get("ipse_assistant"), {{"REFERENCE_DIALOGUE", reference}});

    RolloutLimits limits;
    limits.max_turns = session.turn_count();
    limits.max_context_units = std::numeric_limits<std::size_t>::max();
    limits.stop_marker.clear();

    auto user = gateway_user_policy(gateway, ModelRole::Simulator, tags::kStep1User);
    auto assistant = gateway_assistant_policy(gateway, ModelRole::Assistant, instruction, tags::kStep1Assistant);
    auto simulated = run_dialogue(user, assistant, profile, limits, profile.id + "#sim");
    if (simulated.termination != Termination::TurnLimit) {
        spdlog::warn("reconstruction of '{}' at iteration {} ended early ({}) after {} of {} turns", session.id,
                     profile.iteration, to_string(simulated.termination), simulated.turns.size(), session.turn_count());
    }
    return ReconstructionRecord{profile.iteration, std::move(simulated), session.id};
}

namespace {

// Strips a leading "LABEL:" (ASCII or full-width colon). Returns false if absent.
bool strip_label(std::string& s, std::string_view label) {
    s = text::trim(s);
    if (!s.starts_with(label)) return false;
    std::string rest = s.substr(label.size());
    if (rest.starts_with(":")) {
        rest.erase(0, 1);
    } else if (rest.starts_with("\xEF\xBC\x9A")) {
        rest.erase(0, 3);
    } else {
        return false;
    }
    s = text::trim(rest);
    return true;
}

}  // namespace

std::pair<std::string, std::string> parse_refinement(std::string_view reply) {
    const auto sep = reply.find("|||");
    if (sep == std::string_view::npos) fail(ErrorKind::ParseFailure, "refinement lacks the '|||' delimiter");
    std::string critique(reply.substr(0, sep));
    std::string profile(reply.substr(sep + 3));
    // Reasoning models sometimes think aloud before the answer.
    if (const auto at = critique.rfind("CRITIQUE"); at != std::string::npos) critique.erase(0, at);
    if (!strip_label(critique, "CRITIQUE")) fail(ErrorKind::ParseFailure, "refinement lacks a CRITIQUE section");
    if (!strip_label(profile, "PROFILE")) fail(ErrorKind::ParseFailure, "refinement lacks a PROFILE section");
    if (critique.empty()) fail(ErrorKind::ParseFailure, "refinement has an empty critique");
    if (profile.empty()) fail(ErrorKind::ParseFailure, "refinement has an empty profile");
    return {std::move(critique), std::move(profile)};
}

std::pair<std::string, UserProfile> refine_profile(const DialogueSession& session, const ReconstructionRecord& record,
                                                   const UserProfile& profile, Gateway& gateway,
                                                   const PromptLibrary& prompts) {
    if (record.iteration != profile.iteration) {
        fail(ErrorKind::ContractViolation, "reconstruction iteration " + std::to_string(record.iteration) +
                                               " does not match profile iteration " + std::to_string(profile.iteration));
    }
    const auto prompt = fill_template(prompts.get("ipse_optimize"),
                                      {{"REFERENCE_DIALOGUE", render_transcript(std::span(session.turns))},
                                       {"SIMULATED_DIALOGUE", render_transcript(std::span(record.simulated.turns))},
                                       {"CURRENT_PROFILE", profile.text}});
    std::vector<ChatMessage> messages{{MessageRole::User, prompt}};
    auto reply = gateway.chat(ModelRole::Reasoner, messages, tags::kOptimize);

    std::pair<std::string, std::string> parsed;
    try {
        parsed = parse_refinement(reply.text);
    } catch (const Error& first) {
        spdlog::debug("refinement for '{}' unparsable ({}), re-prompting", session.id, first.what());
        messages.push_back({MessageRole::Assistant, reply.text.empty() ? std::string("(empty)") : reply.text});
        messages.push_back({MessageRole::User, prompts.get("ipse_format_reminder")});
        reply = gateway.chat(ModelRole::Reasoner, messages, tags::kOptimizeRetry);
        parsed = parse_refinement(reply.text);
    }
    const auto next_iteration = profile.iteration + 1;
    UserProfile next{profile_id(profile.session_id, next_iteration), profile.session_id, next_iteration,
                     std::move(parsed.second), parsed.first};
    return {std::move(parsed.first), std::move(next)};
}

ProfileLineage evolve(const DialogueSession& session, Gateway& gateway, const Options& options,
                      const LineageCheckpoint& checkpoint) {
    ProfileLineage lineage;
    lineage.session_id = session.id;
    lineage.profiles.push_back(extract_initial_profile(session, gateway, options.prompts));
    if (checkpoint) checkpoint(lineage);

    for (std::size_t k = 0; k < options.rounds; ++k) {
        const auto& current = lineage.profiles.back();
        auto record = simulate_reconstruction(current, session, gateway, options.prompts);
        auto [critique, next] = refine_profile(session, record, current, gateway, options.prompts);
        lineage.reconstructions.push_back(std::move(record));
        lineage.critiques.push_back(std::move(critique));
        lineage.profiles.push_back(std::move(next));
        lineage.final_index = lineage.profiles.size() - 1;
        if (checkpoint) checkpoint(lineage);
    }

    lineage.final_index = lineage.profiles.size() - 1;
    if (options.selection == FinalSelection::PplArgmin) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < lineage.profiles.size(); ++k) {
            const double ppl = profile_ppl(lineage.profiles[k], session, gateway);
            lineage.ppl.push_back(ppl);
            // Ties go to the later iterate.
            if (ppl <= best) {
                best = ppl;
                lineage.final_index = k;
            }
        }
    }
    return lineage;
}

double profile_ppl(const UserProfile& profile, const DialogueSession& session, Gateway& gateway) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < session.turn_count(); ++j) {
        const auto ctx = context_at(session, profile, j);
        const auto scored =
            gateway.score(ModelRole::Simulator, ScoreRequest{render_messages(ctx, Perspective::AsUser),
                                                             session.turns[j].user.text, tags::kPpl});
        sum += scored.total_logprob();
        count += scored.tokens.size();
    }
    if (count == 0) fail(ErrorKind::ContractViolation, "no user tokens were scored for session '" + session.id + "'");
    return std::exp(-sum / static_cast<double>(count));
}

}  // namespace muse::ipse
