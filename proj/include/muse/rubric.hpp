#pragma once

// Rubric judging of single user utterances (human likeness, persona
// consistency, context coherence on {0, 0.5, 1}), the distance-aware reward,
// reward-model dataset builders and Acc/EM evaluation.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"
#include "muse/prompts.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <span>
#include <string>
#include <vector>

namespace muse::rubric {

inline constexpr std::array<double, 3> kGrid{0.0, 0.5, 1.0};

/// True iff v is exactly 0, 0.5 or 1.
bool on_grid(double v) noexcept;

struct RubricJudgment {
    double human_likeness = 0.0;
    double persona_consistency = 0.0;
    double context_coherence = 0.0;
    std::string rationale;
    double overall = 0.0;

    [[nodiscard]] std::array<double, 3> scores() const { return {human_likeness, persona_consistency, context_coherence}; }
};

/// Validates the grid and fills `overall` with the dimension mean. Throws OutOfRange.
RubricJudgment make_judgment(double hl, double pc, double cc, std::string rationale = {});

nlohmann::json judgment_to_json(const RubricJudgment& j);
RubricJudgment judgment_from_json(const nlohmann::json& j);

/// "RATIONALE: <text>\nHL:<s> PC:<s> CC:<s>"
std::string format_judgment(const RubricJudgment& j);

/// Reads the last "HL:x PC:y CC:z" line and the RATIONALE block before it.
/// Throws ParseFailure on a missing label or off-grid value.
RubricJudgment parse_judgment(std::string_view text);

/// [System(rubric), User(profile, context, candidate)]. Throws InvalidCandidate
/// for a blank utterance.
std::vector<ChatMessage> build_judge_prompt(std::string_view profile_text, std::span<const Utterance> context,
                                            std::string_view utterance,
                                            const PromptLibrary& prompts = PromptLibrary::defaults());

/// One judge call through `role`, re-prompted once if unparsable.
RubricJudgment judge(Gateway& gateway, std::string_view profile_text, std::span<const Utterance> context,
                     std::string_view utterance, std::string tag = "rubric.judge", ModelRole role = ModelRole::Reward,
                     const PromptLibrary& prompts = PromptLibrary::defaults());

/// The scalar turn reward: judge(...).overall.
double score_utterance(Gateway& gateway, std::string_view profile_text, std::span<const Utterance> context,
                       std::string_view utterance, std::string tag = "rubric.judge", ModelRole role = ModelRole::Reward,
                       const PromptLibrary& prompts = PromptLibrary::defaults());

/// 1 - |predicted - gold|. Throws OutOfRange outside [0, 1].
double distance_reward(double predicted, double gold);

// ---------------------------------------------------------------------------
// Reward-model datasets

enum class RmSplit { SftWarmup, Rlvr };

std::string_view to_string(RmSplit s) noexcept;

struct RmExample {
    std::string id;
    std::string profile_text;
    /// Real roles, alternating from the user.
    std::vector<Utterance> context;
    std::string candidate_utterance;
    RubricJudgment gold;
    RmSplit split = RmSplit::SftWarmup;
};

nlohmann::json rm_example_to_json(const RmExample& e);
RmExample rm_example_from_json(const nlohmann::json& j);

struct RmTrainingSets {
    /// {"id", "messages", "target"}: the target completion is the gold CoT and scores.
    std::vector<nlohmann::json> sft;
    /// {"id", "messages", "gold": {"hl","pc","cc"}}: verified with distance_reward.
    std::vector<nlohmann::json> rlvr;
};

/// Throws MissingRationale for a warm-up example without a rationale.
RmTrainingSets build_rm_training_sets(std::span<const RmExample> examples,
                                      const PromptLibrary& prompts = PromptLibrary::defaults());

// ---------------------------------------------------------------------------
// Evaluation

struct AccEm {
    double acc = 0.0;
    double em = 0.0;
};

struct RmEvalReport {
    std::size_t n = 0;
    /// human likeness, persona consistency, context coherence.
    std::array<AccEm, 3> dimensions{};
    AccEm overall;
};

inline constexpr std::array<const char*, 3> kDimensionNames{"human_likeness", "persona_consistency", "context_coherence"};

/// EM is the exact-match rate; Acc is the mean of 1 - |s_hat - s*|.
/// Throws LengthMismatch, or EmptySet for empty input.
RmEvalReport evaluate_rm(std::span<const RubricJudgment> predictions, std::span<const RubricJudgment> golds);

nlohmann::json rm_report_to_json(const RmEvalReport& r);

}  // namespace muse::rubric
