#pragma once

// Group rollouts for GRPO: G dialogues per profile, post-hoc turn rewards,
// session rewards and group-standardized advantages, exported as JSONL.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"
#include "muse/prompts.hpp"
#include "muse/rollout.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace muse::grpo {

namespace tags {
inline constexpr const char* kUser = "grpo.rollout.user";
inline constexpr const char* kAssistant = "grpo.rollout.assistant";
inline constexpr const char* kReward = "grpo.reward";
}  // namespace tags

/// Mean of the turn rewards. Throws EmptyTrajectory.
double session_reward(std::span<const double> turn_rewards);

/// (R_i - mean) / (std + eps) with the population std. A group whose rewards
/// are all equal gets exact zeros. Throws GroupTooSmall for fewer than 2.
std::vector<double> group_advantages(std::span<const double> session_rewards, double eps = 1e-8);

struct TrajectoryGroup {
    std::string group_id;
    UserProfile profile;
    std::vector<SimulatedDialogue> trajectories;
    std::vector<std::vector<double>> turn_rewards;
    std::vector<double> session_rewards;
    std::vector<double> advantages;
};

/// Reward of one user utterance given the profile and the history before it.
using RewardFn =
    std::function<double(const UserProfile& profile, std::span<const Utterance> context, std::string_view utterance)>;

/// Rubric reward through the gateway's Reward role.
RewardFn rubric_reward(Gateway& gateway, const PromptLibrary& prompts = PromptLibrary::defaults());

struct CollectOptions {
    std::size_t group_size = 4;
    double eps = 1e-8;
    RolloutLimits limits;
    std::string assistant_instruction{kDefaultAssistantInstruction};
    std::size_t workers = 1;
    /// Defaults to the profile id.
    std::string group_id;
};

/// G rollouts under one profile, each user turn rewarded against its pre-turn
/// context. Trajectories that fail or produce no turns are dropped; fewer
/// than two survivors raise GroupTooSmall.
TrajectoryGroup collect_group(const UserProfile& profile, Gateway& gateway, const RewardFn& reward,
                              const CollectOptions& options = {});

/// One JSON object per trajectory, in group order.
std::vector<nlohmann::json> trajectory_lines(const TrajectoryGroup& group);

/// {groups, trajectories, mean_reward, std_reward} over every session reward.
nlohmann::json export_manifest(std::span<const TrajectoryGroup> groups);

/// Writes the JSONL to `path` and the manifest next to it as
/// `<stem>.manifest.json`. Returns the manifest. Throws IoError.
nlohmann::json export_trajectories(std::span<const TrajectoryGroup> groups, const std::filesystem::path& path);

}  // namespace muse::grpo
