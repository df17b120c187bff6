#include "muse/grpo.hpp"

#include "muse/error.hpp"
#include "muse/parallel.hpp"
#include "muse/rubric.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

namespace muse::grpo {

using nlohmann::json;

double session_reward(std::span<const double> turn_rewards) {
    if (turn_rewards.empty()) fail(ErrorKind::EmptyTrajectory, "trajectory has no rewarded user turns");
    return std::accumulate(turn_rewards.begin(), turn_rewards.end(), 0.0) / static_cast<double>(turn_rewards.size());
}

std::vector<double> group_advantages(std::span<const double> session_rewards, double eps) {
    const auto g = session_rewards.size();
    if (g < 2) fail(ErrorKind::GroupTooSmall, "a group needs at least 2 trajectories, got " + std::to_string(g));
    std::vector<double> out(g, 0.0);
    const auto [lo, hi] = std::minmax_element(session_rewards.begin(), session_rewards.end());
    if (*lo == *hi) return out;

    const double n = static_cast<double>(g);
    const double mean = std::accumulate(session_rewards.begin(), session_rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : session_rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    if (sd == 0.0) return out;
    for (std::size_t i = 0; i < g; ++i) out[i] = (session_rewards[i] - mean) / (sd + eps);
    return out;
}

RewardFn rubric_reward(Gateway& gateway, const PromptLibrary& prompts) {
    return [&gateway, &prompts](const UserProfile& profile, std::span<const Utterance> context, std::string_view utterance) {
        return rubric::score_utterance(gateway, profile.text, context, utterance, tags::kReward, ModelRole::Reward, prompts);
    };
}

TrajectoryGroup collect_group(const UserProfile& profile, Gateway& gateway, const RewardFn& reward,
                              const CollectOptions& options) {
    if (options.group_size < 2) {
        fail(ErrorKind::GroupTooSmall, "group size must be at least 2, got " + std::to_string(options.group_size));
    }
    const auto group_id = options.group_id.empty() ? profile.id : options.group_id;
    auto user = gateway_user_policy(gateway, ModelRole::Simulator, tags::kUser);
    auto assistant = gateway_assistant_policy(gateway, ModelRole::Assistant, options.assistant_instruction, tags::kAssistant);

    struct Slot {
        std::optional<SimulatedDialogue> dialogue;
        std::vector<double> rewards;
    };
    std::vector<Slot> slots(options.group_size);

    parallel_for(options.group_size, options.workers, [&](std::size_t i) {
        SimulatedDialogue d;
        try {
            d = run_dialogue(user, assistant, profile, options.limits, group_id + "#t" + std::to_string(i));
        } catch (const Error& e) {
            spdlog::warn("group '{}': trajectory {} failed ({}), dropped", group_id, i, e.what());
            return;
        }
        if (d.turns.empty()) {
            spdlog::warn("group '{}': trajectory {} has no turns ({}), dropped", group_id, i, to_string(d.termination));
            return;
        }
        const auto flat = flatten(std::span(d.turns));
        std::vector<double> rewards;
        for (std::size_t j = 0; j < d.turns.size(); ++j) {
            rewards.push_back(reward(profile, std::span(flat).first(2 * j), d.turns[j].user.text));
        }
        slots[i] = Slot{std::move(d), std::move(rewards)};
    });

    TrajectoryGroup group;
    group.group_id = group_id;
    group.profile = profile;
    for (auto& s : slots) {
        if (!s.dialogue) continue;
        group.session_rewards.push_back(session_reward(s.rewards));
        group.trajectories.push_back(std::move(*s.dialogue));
        group.turn_rewards.push_back(std::move(s.rewards));
    }
    if (group.trajectories.size() < 2) {
        fail(ErrorKind::GroupTooSmall, "group '" + group_id + "' has " + std::to_string(group.trajectories.size()) +
                                           " usable trajectories");
    }
    group.advantages = group_advantages(group.session_rewards, options.eps);
    return group;
}

std::vector<json> trajectory_lines(const TrajectoryGroup& group) {
    std::vector<json> lines;
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        const auto& d = group.trajectories[i];
        json messages = json::array();
        for (const auto& t : d.turns) {
            messages.push_back({{"role", "user"}, {"content", t.user.text}, {"is_user_turn", true}});
            messages.push_back({{"role", "assistant"}, {"content", t.assistant.text}, {"is_user_turn", false}});
        }
        lines.push_back({{"group_id", group.group_id},
                         {"trajectory_index", i},
                         {"profile_id", group.profile.id},
                         {"profile_text", group.profile.text},
                         {"messages", std::move(messages)},
                         {"turn_rewards", group.turn_rewards[i]},
                         {"session_reward", group.session_rewards[i]},
                         {"advantage", group.advantages[i]},
                         {"termination", std::string(to_string(d.termination))}});
    }
    return lines;
}

json export_manifest(std::span<const TrajectoryGroup> groups) {
    std::vector<double> rewards;
    for (const auto& g : groups) rewards.insert(rewards.end(), g.session_rewards.begin(), g.session_rewards.end());
    double mean = 0.0;
    double sd = 0.0;
    if (!rewards.empty()) {
        const double n = static_cast<double>(rewards.size());
        mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
        double var = 0.0;
        for (double r : rewards) var += (r - mean) * (r - mean);
        sd = std::sqrt(var / n);
    }
    return json{{"groups", groups.size()}, {"trajectories", rewards.size()}, {"mean_reward", mean}, {"std_reward", sd}};
}

json export_trajectories(std::span<const TrajectoryGroup> groups, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) fail(ErrorKind::IoError, "cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    for (const auto& g : groups) {
        for (const auto& line : trajectory_lines(g)) out << line.dump() << '\n';
    }
    out.close();
    if (!out) fail(ErrorKind::IoError, "write failed for " + path.string());

    auto manifest = export_manifest(groups);
    auto manifest_path = path;
    manifest_path.replace_filename(path.stem().string() + ".manifest.json");
    std::ofstream m(manifest_path, std::ios::binary);
    if (!m) fail(ErrorKind::IoError, "cannot write " + manifest_path.string());
    m << manifest.dump(2) << '\n';
    if (!m) fail(ErrorKind::IoError, "write failed for " + manifest_path.string());
    return manifest;
}

}  // namespace muse::grpo
