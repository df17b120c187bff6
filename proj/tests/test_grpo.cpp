#include "support.hpp"

#include "muse/grpo.hpp"
#include "muse/text.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace muse;
using testing::json;
using testing::kind_of;

namespace {

// Two-pass oracle with long double accumulation.
std::vector<double> oracle_advantages(const std::vector<double>& r, double eps) {
    long double mean = 0;
    for (double x : r) mean += x;
    mean /= r.size();
    long double var = 0;
    for (double x : r) var += (x - mean) * (x - mean);
    var /= r.size();
    const bool flat = std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; });
    std::vector<double> out;
    for (double x : r) out.push_back(flat ? 0.0 : static_cast<double>((x - mean) / (std::sqrt(var) + eps)));
    return out;
}

grpo::CollectOptions options(std::size_t g, std::size_t turns = 2) {
    grpo::CollectOptions o;
    o.group_size = g;
    o.limits.max_turns = turns;
    return o;
}

// Reward depends only on the utterance: "good ..." scores 1, everything else 0.5.
double word_reward(const UserProfile&, std::span<const Utterance>, std::string_view u) {
    return u.starts_with("good") ? 1.0 : 0.5;
}

}  // namespace

TEST_CASE("session reward") {
    const std::vector<double> a{1, 0.5, 0.5, 1};
    CHECK(grpo::session_reward(a) == 0.75);
    CHECK(grpo::session_reward(std::vector<double>{0.5}) == 0.5);
    CHECK(kind_of([] { grpo::session_reward(std::vector<double>{}); }) == ErrorKind::EmptyTrajectory);
}

TEST_CASE("session reward matches a brute-force mean and ignores order") {
    std::mt19937 rng(5);
    std::uniform_int_distribution<int> len(1, 20);
    std::uniform_int_distribution<int> sixths(0, 6);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> turns(len(rng));
        for (auto& t : turns) t = sixths(rng) / 6.0;
        long double sum = 0;
        for (double t : turns) sum += t;
        const double oracle = static_cast<double>(sum / turns.size());
        const double r = grpo::session_reward(turns);
        if (std::abs(r - oracle) > 1e-12) FAIL("mean mismatch");
        std::shuffle(turns.begin(), turns.end(), rng);
        if (std::abs(grpo::session_reward(turns) - r) > 1e-12) FAIL("order dependence");
    }
    CHECK(true);
}

TEST_CASE("group advantages, hand-derived cases") {
    const auto a = grpo::group_advantages(std::vector<double>{0.75, 0.25});
    CHECK(a[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(a[1] == doctest::Approx(-1.0).epsilon(1e-6));
    const auto b = grpo::group_advantages(std::vector<double>{1.0, 0.0});
    CHECK(b[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(b[1] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(grpo::group_advantages(std::vector<double>{0.6, 0.6, 0.6, 0.6}) == std::vector<double>{0, 0, 0, 0});
    CHECK(kind_of([] { grpo::group_advantages(std::vector<double>{1.0}); }) == ErrorKind::GroupTooSmall);
}

TEST_CASE("group advantages over random groups") {
    std::mt19937 rng(2024);
    std::uniform_int_distribution<int> gsize(2, 8);
    std::uniform_real_distribution<double> reward(0.0, 1.0);
    std::uniform_real_distribution<double> shift(-5.0, 5.0);
    std::bernoulli_distribution flat(0.1);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> r(gsize(rng));
        if (flat(rng)) {
            std::fill(r.begin(), r.end(), reward(rng));
        } else {
            for (auto& x : r) x = reward(rng);
        }
        const auto adv = grpo::group_advantages(r);
        const double sum = std::accumulate(adv.begin(), adv.end(), 0.0);
        if (std::abs(sum) > 1e-6) FAIL("advantages do not sum to zero");
        const auto oracle = oracle_advantages(r, 1e-8);
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (std::abs(adv[i] - oracle[i]) > 1e-9) FAIL("oracle mismatch");
        }
        const bool all_equal = std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; });
        if (all_equal && std::any_of(adv.begin(), adv.end(), [](double x) { return x != 0.0; })) FAIL("zero variance");

        const double c = shift(rng);
        std::vector<double> shifted(r);
        for (auto& x : shifted) x += c;
        const auto adv2 = grpo::group_advantages(shifted);
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (std::abs(adv[i] - adv2[i]) > 1e-9) FAIL("not shift invariant");
        }
    }
    CHECK(true);
}

TEST_CASE("collect a group of four with scripted rollouts and judgments") {
    auto gw = testing::scripted_gateway(json::array({
        {{"tag", "grpo.rollout.user"}, {"response", "good question"}, {"times", 2}},
        {{"tag", "grpo.rollout.user"}, {"response", "meh"}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "answer"}, {"times", 0}},
        {{"tag", "grpo.reward"}, {"contains", "good question"}, {"response", "RATIONALE: r\nHL:1 PC:1 CC:1"}, {"times", 0}},
        {{"tag", "grpo.reward"}, {"response", "RATIONALE: r\nHL:0 PC:0.5 CC:1"}, {"times", 0}},
    }));
    const auto profile = testing::make_profile("g");
    const auto group = grpo::collect_group(profile, *gw, grpo::rubric_reward(*gw), options(4));
    REQUIRE(group.trajectories.size() == 4);
    CHECK(group.session_rewards.size() == 4);
    CHECK(group.advantages.size() == 4);
    CHECK(group.group_id == profile.id);
    // Rollout 0 opens with both "good question" turns; the rest never do.
    CHECK(group.turn_rewards[0] == std::vector<double>{1.0, 1.0});
    CHECK(group.turn_rewards[1] == std::vector<double>{0.5, 0.5});
    CHECK(group.session_rewards[0] == 1.0);
    CHECK(std::abs(std::accumulate(group.advantages.begin(), group.advantages.end(), 0.0)) <= 1e-6);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(group.session_rewards[i] == grpo::session_reward(group.turn_rewards[i]));
        CHECK(group.trajectories[i].id == profile.id + "#t" + std::to_string(i));
    }
    CHECK(group.advantages == grpo::group_advantages(group.session_rewards));

    std::size_t reward_calls = 0;
    for (const auto& e : gw->transcript().entries()) reward_calls += e["tag"] == "grpo.reward";
    CHECK(reward_calls == 8);
}

TEST_CASE("turn rewards see only their pre-turn context") {
    auto gw = testing::scripted_gateway(json::array({
        {{"tag", "grpo.rollout.user"}, {"response", "u"}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "a"}, {"times", 0}},
    }));
    std::vector<std::size_t> context_sizes;
    grpo::RewardFn reward = [&](const UserProfile&, std::span<const Utterance> ctx, std::string_view) {
        context_sizes.push_back(ctx.size());
        return 0.5;
    };
    grpo::collect_group(testing::make_profile("c"), *gw, reward, options(2, 3));
    CHECK(context_sizes == std::vector<std::size_t>{0, 2, 4, 0, 2, 4});
}

TEST_CASE("degenerate groups") {
    auto gw = testing::scripted_gateway(json::array({
        {{"tag", "grpo.rollout.user"}, {"response", "same"}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "same"}, {"times", 0}},
    }));
    const auto flat = grpo::collect_group(testing::make_profile("f"), *gw, word_reward, options(4));
    CHECK(flat.advantages == std::vector<double>(4, 0.0));

    CHECK(kind_of([&] { grpo::collect_group(testing::make_profile("f"), *gw, word_reward, options(1)); }) ==
          ErrorKind::GroupTooSmall);

    // Only one rollout survives: the others hit an empty user reply before any turn.
    auto sparse = testing::scripted_gateway(json::array({
        {{"tag", "grpo.rollout.user"}, {"response", "good"}, {"times", 1}},
        {{"tag", "grpo.rollout.user"}, {"response", ""}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "a"}, {"times", 0}},
    }));
    CHECK(kind_of([&] { grpo::collect_group(testing::make_profile("s"), *sparse, word_reward, options(3, 1)); }) ==
          ErrorKind::GroupTooSmall);
}

TEST_CASE("export") {
    auto gw = testing::scripted_gateway(json::array({
        {{"tag", "grpo.rollout.user"}, {"response", "good start"}, {"times", 2}},
        {{"tag", "grpo.rollout.user"}, {"response", "plain"}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "reply"}, {"times", 0}},
    }));
    std::vector<grpo::TrajectoryGroup> groups;
    groups.push_back(grpo::collect_group(testing::make_profile("x"), *gw, word_reward, options(4)));
    groups.push_back(grpo::collect_group(testing::make_profile("y"), *gw, word_reward, options(4)));

    testing::TempDir dir;
    const auto m = grpo::export_trajectories(groups, dir / "out" / "grpo.jsonl");
    CHECK(m["groups"] == 2);
    CHECK(m["trajectories"] == 8);
    CHECK(std::filesystem::exists(dir / "out" / "grpo.manifest.json"));

    const auto first = testing::read_file(dir / "out" / "grpo.jsonl");
    grpo::export_trajectories(groups, dir / "out" / "grpo.jsonl");
    CHECK(testing::read_file(dir / "out" / "grpo.jsonl") == first);

    std::istringstream in(first);
    std::string line;
    std::size_t n = 0;
    std::vector<double> all;
    while (std::getline(in, line)) {
        const auto j = json::parse(line);
        const auto& g = groups[n / 4];
        const auto i = j["trajectory_index"].get<std::size_t>();
        CHECK(j["group_id"] == g.group_id);
        CHECK(j["advantage"].get<double>() == grpo::group_advantages(g.session_rewards)[i]);
        CHECK(j["session_reward"].get<double>() == g.session_rewards[i]);
        CHECK(j["messages"][0]["is_user_turn"] == true);
        CHECK(j["messages"][1]["is_user_turn"] == false);
        all.push_back(g.session_rewards[i]);
        ++n;
    }
    CHECK(n == 8);
    const double mean = std::accumulate(all.begin(), all.end(), 0.0) / all.size();
    CHECK(m["mean_reward"].get<double>() == doctest::Approx(mean));

    testing::write_file(dir / "blocker", "file, not a directory");
    CHECK(kind_of([&] { grpo::export_trajectories(groups, dir / "blocker" / "grpo.jsonl"); }) == ErrorKind::IoError);
}
