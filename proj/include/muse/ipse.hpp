#pragma once

// Iterative profile self-evolution: extract an initial profile from a real
// dialogue, reconstruct the dialogue under the profile with an assistant that
// sees the reference, critique the discrepancy and rewrite the profile.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"
#include "muse/prompts.hpp"
#include "muse/rollout.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace muse::ipse {

namespace tags {
inline constexpr const char* kExtract = "ipse.extract";
inline constexpr const char* kStep1User = "ipse.step1.user";
inline constexpr const char* kStep1Assistant = "ipse.step1.assistant";
inline constexpr const char* kOptimize = "ipse.step2.optimize";
inline constexpr const char* kOptimizeRetry = "ipse.step2.retry";
inline constexpr const char* kPpl = "ipse.ppl";
}  // namespace tags

enum class FinalSelection {
    /// P* = P_N.
    Last,
    /// The iterate with the lowest profile_ppl.
    PplArgmin,
};

std::string_view to_string(FinalSelection s) noexcept;
std::optional<FinalSelection> parse_final_selection(std::string_view s);

struct Options {
    std::size_t rounds = 2;
    FinalSelection selection = FinalSelection::Last;
    PromptLibrary prompts = PromptLibrary::defaults();
};

struct ReconstructionRecord {
    std::size_t iteration = 0;
    SimulatedDialogue simulated;
    std::string reference_session_id;
};

struct ProfileLineage {
    std::string session_id;
    std::vector<UserProfile> profiles;
    std::vector<std::string> critiques;
    std::size_t final_index = 0;
    std::vector<ReconstructionRecord> reconstructions;
    /// Filled only under FinalSelection::PplArgmin, one value per profile.
    std::vector<double> ppl;

    [[nodiscard]] const UserProfile& final_profile() const { return profiles.at(final_index); }
};

nlohmann::json lineage_to_json(const ProfileLineage& lineage);
ProfileLineage lineage_from_json(const nlohmann::json& j);

std::string profile_id(std::string_view session_id, std::size_t iteration);

/// Single-pass extraction by the reasoner. Throws EmptyProfile on blank output.
UserProfile extract_initial_profile(const DialogueSession& session, Gateway& gateway,
                                    const PromptLibrary& prompts = PromptLibrary::defaults());

/// Rolls out exactly T turns. The user side sees only (profile, simulated
/// history); the assistant side additionally gets the full reference dialogue
/// in its system prompt.
ReconstructionRecord simulate_reconstruction(const UserProfile& profile, const DialogueSession& session, Gateway& gateway,
                                             const PromptLibrary& prompts = PromptLibrary::defaults());

/// Splits "CRITIQUE: ... ||| PROFILE: ..." into (critique, profile text).
/// Throws ParseFailure.
std::pair<std::string, std::string> parse_refinement(std::string_view reply);

/// One reasoning call over (reference, simulated, current profile). On a
/// malformed reply re-prompts once with a format reminder, then throws
/// ParseFailure.
std::pair<std::string, UserProfile> refine_profile(const DialogueSession& session, const ReconstructionRecord& record,
                                                   const UserProfile& profile, Gateway& gateway,
                                                   const PromptLibrary& prompts = PromptLibrary::defaults());

/// Called after each new profile is appended so callers can persist partial lineages.
using LineageCheckpoint = std::function<void(const ProfileLineage&)>;

ProfileLineage evolve(const DialogueSession& session, Gateway& gateway, const Options& options = {},
                      const LineageCheckpoint& checkpoint = {});

/// exp(-sum of logprobs / token count) of every reference user utterance,
/// each scored under the AsUser rendering of its preceding context.
double profile_ppl(const UserProfile& profile, const DialogueSession& session, Gateway& gateway);

}  // namespace muse::ipse
