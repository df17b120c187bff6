// Acceptance checks: one line per criterion, scripted backends only.

#include "fixtures.hpp"

#include "muse/commands.hpp"
#include "muse/corpus.hpp"
#include "muse/eval.hpp"
#include "muse/grpo.hpp"
#include "muse/ipse.hpp"
#include "muse/rollout.hpp"
#include "muse/rubric.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

using namespace muse;
using testing::json;

namespace {

/// Collects the first failure; later checks in the same criterion are skipped.
struct Check {
    std::string failure;

    void expect(bool ok, const std::string& what) {
        if (!ok && failure.empty()) failure = what;
    }
    [[nodiscard]] bool ok() const { return failure.empty(); }
};

int failures = 0;

void criterion(int n, const char* title, const std::function<void(Check&)>& body) {
    Check c;
    const auto start = std::chrono::steady_clock::now();
    try {
        body(c);
    } catch (const std::exception& e) {
        c.expect(false, std::string("exception: ") + e.what());
    }
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %2d %s (%.1f ms)%s%s\n", c.ok() ? "PASS" : "FAIL", n, title, ms, c.ok() ? "" : ": ",
                c.failure.c_str());
    if (!c.ok()) ++failures;
}

std::string str(double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
}

std::vector<json> entries_tagged(const Transcript& t, const std::string& tag) {
    std::vector<json> out;
    for (const auto& e : t.entries()) {
        if (e["tag"] == tag) out.push_back(e);
    }
    return out;
}

bool any_message_contains(const json& entry, const std::string& needle) {
    for (const auto& m : entry["request"]["messages"]) {
        if (text::contains(m["content"].get<std::string>(), needle)) return true;
    }
    return false;
}

void distance_reward(Check& c) {
    std::set<double> seen;
    std::size_t pairs = 0;
    const auto start = std::chrono::steady_clock::now();
    for (double a : rubric::kGrid) {
        for (double b : rubric::kGrid) {
            const double r = rubric::distance_reward(a, b);
            // Oracle in integer half-steps.
            const long ha = std::lround(a * 2), hb = std::lround(b * 2);
            const double expected = 1.0 - std::labs(ha - hb) / 2.0;
            c.expect(r == expected, "reward(" + str(a) + ", " + str(b) + ") = " + str(r));
            seen.insert(r);
            ++pairs;
        }
    }
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start).count();
    c.expect(pairs == 9, "pair count");
    c.expect(seen == std::set<double>{0.0, 0.5, 1.0}, "value set");
    c.expect(us < 1000, "runtime " + std::to_string(us) + " us");
}

void session_aggregation(Check& c) {
    std::mt19937 rng(11);
    std::uniform_int_distribution<int> len(1, 30);
    std::uniform_int_distribution<int> sixths(0, 6);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> turns(len(rng));
        for (auto& t : turns) t = sixths(rng) / 6.0;
        long double sum = 0;
        for (double t : turns) sum += t;
        const double oracle = static_cast<double>(sum / turns.size());
        const double r = grpo::session_reward(turns);
        c.expect(std::abs(r - oracle) <= 1e-12, "mean mismatch at trial " + std::to_string(trial));
        std::shuffle(turns.begin(), turns.end(), rng);
        c.expect(std::abs(grpo::session_reward(turns) - r) <= 1e-12, "order dependence at trial " + std::to_string(trial));
    }
}

void grpo_advantages(Check& c) {
    std::mt19937 rng(2025);
    std::uniform_int_distribution<int> gsize(2, 8);
    std::uniform_real_distribution<double> reward(0.0, 1.0);
    std::uniform_real_distribution<double> shift(-10.0, 10.0);
    std::bernoulli_distribution flat(0.1);
    std::size_t zero_variance_groups = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> r(gsize(rng));
        if (flat(rng)) {
            std::fill(r.begin(), r.end(), reward(rng));
        } else {
            for (auto& x : r) x = reward(rng);
        }
        const auto adv = grpo::group_advantages(r);
        const double sum = std::accumulate(adv.begin(), adv.end(), 0.0);
        c.expect(std::abs(sum) <= 1e-6, "sum " + str(sum));
        if (std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; })) {
            ++zero_variance_groups;
            c.expect(adv == std::vector<double>(r.size(), 0.0), "zero-variance group not zero");
        }
        const double k = shift(rng);
        auto shifted = r;
        for (auto& x : shifted) x += k;
        const auto adv2 = grpo::group_advantages(shifted);
        for (std::size_t i = 0; i < r.size(); ++i) c.expect(std::abs(adv[i] - adv2[i]) <= 1e-9, "shift changed advantage");
    }
    c.expect(zero_variance_groups > 0, "no zero-variance group sampled");
    const auto hand = grpo::group_advantages(std::vector<double>{0.75, 0.25});
    c.expect(std::abs(hand[0] - 1.0) <= 1e-6 && std::abs(hand[1] + 1.0) <= 1e-6,
             "[0.75, 0.25] -> [" + str(hand[0]) + ", " + str(hand[1]) + "]");
}

void loss_masking(Check& c) {
    const auto session = testing::make_session("mask", 4);
    const auto records = corpus::build_sft_records(testing::make_profile("mask"), session);
    c.expect(records.size() == 4, "record count");
    const std::vector<std::vector<double>> lps{
        {std::log(0.5), std::log(0.25)},
        {std::log(0.9)},
        {std::log(0.1), std::log(0.2), std::log(0.3)},
        {std::log(0.75), std::log(0.5), std::log(0.5), std::log(0.6)},
    };
    json script = json::array();
    for (std::size_t j = 0; j < 4; ++j) {
        script.push_back({{"tag", "sft.nll"}, {"contains", session.turns[j].user.text}, {"logprobs", lps[j]}});
    }
    // Hand value: minus the sum of the scripted target-token logprobs.
    const double hand = -(std::log(0.5) + std::log(0.25) + std::log(0.9) + std::log(0.1) + std::log(0.2) + std::log(0.3) +
                          std::log(0.75) + std::log(0.5) + std::log(0.5) + std::log(0.6));
    auto gw = testing::scripted_gateway(script);
    const double nll = corpus::masked_nll(records, corpus::gateway_scorer(*gw));
    c.expect(std::abs(nll - hand) <= 1e-9, "masked_nll " + str(nll) + " vs " + str(hand));

    auto with_context = [&](double context_lp) {
        return [&, context_lp](const corpus::SftRecord& r) {
            std::vector<corpus::ScoredToken> out;
            for (const auto& span : corpus::masked_spans(r)) {
                if (span.segment != corpus::Segment::Context) continue;
                for (const auto& cp : mock_tokenize(span.text)) out.push_back({cp, context_lp, corpus::Segment::Context});
            }
            for (double lp : lps[r.turn_index]) out.push_back({"t", lp, corpus::Segment::Target});
            return out;
        };
    };
    const double a = corpus::masked_nll(records, with_context(-0.05));
    const double b = corpus::masked_nll(records, with_context(-9.0));
    c.expect(a == b, "context logprobs moved the loss");
    c.expect(std::abs(a - hand) <= 1e-9, "full-sequence scorer disagrees with hand value");
}

void ipse_shape(Check& c) {
    const auto session = testing::make_session("lawyer", 3);
    const auto reference = render_transcript(std::span(session.turns));
    auto gw = testing::scripted_gateway(json::array({
        {{"tag", "ipse.extract"}, {"response", "Background: you are a lawyer promoting a practice online."}},
        {{"tag", "ipse.step1.user"}, {"response", "I'm a lawyer."}, {"times", 0}},
        {{"tag", "ipse.step1.assistant"}, {"response", "Welcome."}, {"times", 0}},
        {{"tag", "ipse.step2.optimize"}, {"response", "CRITIQUE: too eager ||| PROFILE: Hold the case back at first."}},
        {{"tag", "ipse.step2.optimize"}, {"response", "CRITIQUE: close ||| PROFILE: Reveal the case only after pricing."}},
    }));
    const auto lineage = ipse::evolve(session, *gw, {.rounds = 2});
    c.expect(lineage.profiles.size() == 3, std::to_string(lineage.profiles.size()) + " profiles");
    c.expect(lineage.critiques.size() == 2, std::to_string(lineage.critiques.size()) + " critiques");

    const auto users = entries_tagged(gw->transcript(), "ipse.step1.user");
    const auto assistants = entries_tagged(gw->transcript(), "ipse.step1.assistant");
    c.expect(!users.empty() && !assistants.empty(), "no step-one traffic");
    for (const auto& e : assistants) c.expect(any_message_contains(e, reference), "assistant prompt lacks the reference");
    for (const auto& e : users) {
        c.expect(!any_message_contains(e, reference), "user prompt contains the reference");
        for (const auto& t : session.turns) {
            c.expect(!any_message_contains(e, t.assistant.text), "user prompt contains a reference assistant turn");
        }
    }
}

void ppl_oracle(Check& c) {
    const auto session = testing::make_session("p", 3);
    for (std::size_t v : {7u, 1000u, 50257u}) {
        auto gw = testing::scripted_gateway(json{{"uniform_vocab", v}, {"entries", json::array()}});
        const double ppl = ipse::profile_ppl(testing::make_profile("p"), session, *gw);
        c.expect(std::abs(ppl - static_cast<double>(v)) <= 1e-6 * v, "V=" + std::to_string(v) + " gave " + str(ppl));
    }
    const auto single = testing::make_session("q", 1);
    auto two = testing::scripted_gateway(json::array({{{"tag", "ipse.ppl"}, {"logprobs", {std::log(0.1), std::log(0.4)}}}}));
    const double ppl = ipse::profile_ppl(testing::make_profile("q"), single, *two);
    c.expect(std::abs(ppl - 5.0) <= 1e-9, "[ln .1, ln .4] gave " + str(ppl));
}

void filter_partition(Check& c) {
    const std::vector<DialogueSession> sessions{testing::make_session("t3", 3), testing::make_session("t4", 4)};
    const auto kept = corpus::filter_min_turns(sessions);
    c.expect(kept.size() == 1 && kept[0].id == "t4", "T=3/T=4 filter");

    std::mt19937 rng(77);
    std::uniform_int_distribution<int> grid(0, 12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<corpus::DifficultyScore> scores;
        for (int i = 0; i < 20; ++i) {
            corpus::DifficultyScore s;
            s.session_id = "s" + std::string(i < 10 ? "0" : "") + std::to_string(i);
            s.total = grid(rng) / 12.0;
            scores.push_back(s);
        }
        const auto p = corpus::partition(scores, 0.10);
        c.expect(p.rl_ids.size() == 2 && p.sft_ids.size() == 18, "partition sizes");
        // Oracle: rank by (total desc, id asc) by counting who beats whom.
        std::set<std::string> oracle;
        for (const auto& a : scores) {
            std::size_t better = 0;
            for (const auto& b : scores) better += b.total > a.total || (b.total == a.total && b.session_id < a.session_id);
            if (better < 2) oracle.insert(a.session_id);
        }
        c.expect(p.rl_ids == oracle, "RL set differs from the ranking oracle");
        double min_rl = 2, max_sft = -1;
        for (const auto& s : scores) (p.rl_ids.contains(s.session_id) ? min_rl = std::min(min_rl, s.total)
                                                                        : max_sft = std::max(max_sft, s.total));
        c.expect(min_rl >= max_sft, "RL does not dominate SFT");
        std::shuffle(scores.begin(), scores.end(), rng);
        const auto q = corpus::partition(scores, 0.10);
        c.expect(q.rl_ids == p.rl_ids && q.sft_ids == p.sft_ids, "partition depends on input order");
    }
}

void rm_metrics(Check& c) {
    const std::vector<rubric::RubricJudgment> gold{
        rubric::make_judgment(1, 0.5, 1),
        rubric::make_judgment(0, 1, 0.5),
        rubric::make_judgment(0.5, 0.5, 0),
        rubric::make_judgment(1, 1, 1),
    };
    auto pred = gold;
    pred[2].human_likeness = 1.0;
    pred[0].persona_consistency = 1.0;
    pred[1].context_coherence = 0.0;
    const auto report = rubric::evaluate_rm(pred, gold);
    for (std::size_t d = 0; d < 3; ++d) {
        // Enumeration oracle.
        double acc = 0, em = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const double gap = std::abs(pred[i].scores()[d] - gold[i].scores()[d]);
            acc += (gap == 0 ? 1.0 : gap == 0.5 ? 0.5 : 0.0) / 4;
            em += (gap == 0 ? 1.0 : 0.0) / 4;
        }
        c.expect(acc == 0.875 && em == 0.75, "oracle disagrees with the crafted set");
        c.expect(report.dimensions[d].acc == 0.875, std::string(rubric::kDimensionNames[d]) + " Acc " + str(report.dimensions[d].acc));
        c.expect(report.dimensions[d].em == 0.75, std::string(rubric::kDimensionNames[d]) + " EM " + str(report.dimensions[d].em));
    }

    std::mt19937 rng(4);
    std::uniform_int_distribution<int> pick(0, 2), size(1, 16);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<rubric::RubricJudgment> p, g;
        for (int i = size(rng); i > 0; --i) {
            p.push_back(rubric::make_judgment(rubric::kGrid[pick(rng)], rubric::kGrid[pick(rng)], rubric::kGrid[pick(rng)]));
            g.push_back(rubric::make_judgment(rubric::kGrid[pick(rng)], rubric::kGrid[pick(rng)], rubric::kGrid[pick(rng)]));
        }
        const auto r = rubric::evaluate_rm(p, g);
        for (const auto& d : r.dimensions) c.expect(d.em <= d.acc + 1e-12, "EM > Acc at trial " + std::to_string(trial));
        c.expect(r.overall.em <= r.overall.acc + 1e-12, "overall EM > Acc");
    }
}

void rubric_round_trip(Check& c) {
    std::size_t n = 0;
    for (double hl : rubric::kGrid) {
        for (double pc : rubric::kGrid) {
            for (double cc : rubric::kGrid) {
                const auto j = rubric::make_judgment(hl, pc, cc, "reasoning");
                const auto back = rubric::parse_judgment(rubric::format_judgment(j));
                c.expect(back.scores() == j.scores() && back.rationale == j.rationale, "round trip failed");
                ++n;
            }
        }
    }
    c.expect(n == 27, "combination count");
    for (const char* bad : {"HL:0.7 PC:1 CC:1", "HL:1 PC:0.25 CC:1", "HL:1 PC:1 CC:1.5"}) {
        bool rejected = false;
        try {
            rubric::parse_judgment(bad);
        } catch (const Error& e) {
            rejected = e.kind() == ErrorKind::ParseFailure;
        }
        c.expect(rejected, std::string("accepted ") + bad);
    }
}

void pipeline_determinism(Check& c) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::string> manifests;
    for (int i = 0; i < 2; ++i) {
        testing::TempDir dir;
        auto run = app::open_run(load_config(testing::write_pipeline_fixture(dir.path())), "pipeline");
        const auto m = app::cmd_pipeline(run);
        c.expect(m.at("files").size() > 10, "manifest too small");
        manifests.push_back(testing::read_file(run.dir / "manifest.json"));
    }
    const auto seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(manifests[0] == manifests[1], "manifests differ");
    c.expect(seconds < 30.0, "took " + str(seconds) + " s");
}

void report_fidelity(Check& c) {
    // Main results table, Muse row, as printed.
    eval::EvalReport r;
    r.model = "Muse";
    r.ai_prob_pct = 31.18;
    r.style_sim = 0.7534;
    r.ava = 64.89;
    r.contextual_relevance = 0.9196;
    r.response_fidelity = 0.9776;
    r.goal_contribution = 0.8763;
    r.linguistic_naturalness = 0.9620;
    r.persona_consistency = 0.8378;
    r.goal_effectiveness = 0.7967;
    r.dialogue_coherence = 0.8685;
    r.constraint_compliance = 0.8739;
    const auto report = eval::build_report(r);
    const auto md = eval::render_markdown(report);
    c.expect(text::contains(md, "| Muse | 31.18 | 0.7534 | 64.89 | 0.9196 | 0.9776 | 0.8763 | 0.9620 |"), "panel A row");
    c.expect(text::contains(md, "| Muse | 0.8378 | 0.7967 | 0.8685 | 0.8739 | 0.8442 |"), "panel B row");
    c.expect(report.session_avg && std::abs(*report.session_avg - 0.8442) <= 5e-5, "avg " + str(report.session_avg.value_or(-1)));
}

void rollout_termination(Check& c) {
    std::mt19937 rng(99);
    std::size_t dialogues = 0;
    std::size_t calls = 0;
    for (int trial = 0; trial < 500; ++trial) {
        RolloutLimits l;
        l.max_turns = 1 + rng() % 12;
        l.max_context_units = 1 + rng() % 500;
        l.stop_marker = trial % 2 ? "[END]" : "";
        std::mt19937 gen(rng());
        auto reply = [&gen](bool user) {
            std::string t(gen() % 50, user ? 'u' : 'a');
            if (user && gen() % 20 == 0) t += " [END]";
            if (gen() % 30 == 0) t.clear();
            return PolicyReply{t, std::nullopt};
        };
        auto user = [&](const UserProfile&, std::span<const Utterance>) { return reply(true); };
        auto assistant = [&](std::span<const Utterance>) { return reply(false); };
        auto probe = [&](Role, std::size_t units) {
            ++calls;
            c.expect(units <= l.max_context_units, "generation called over budget");
        };
        const auto d = run_dialogue(user, assistant, testing::make_profile("r"), l, "r", probe);
        c.expect(d.turns.size() <= l.max_turns, "turn cap exceeded");
        for (const auto& t : d.turns) c.expect(!t.user.text.empty() && !t.assistant.text.empty(), "empty utterance kept");
        ++dialogues;
    }
    c.expect(dialogues == 500, "dialogue count");
    c.expect(calls > 0, "probe never called");
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    criterion(1, "distance-aware reward exactness", distance_reward);
    criterion(2, "session reward aggregation", session_aggregation);
    criterion(3, "GRPO advantages", grpo_advantages);
    criterion(4, "loss masking", loss_masking);
    criterion(5, "IPSE asymmetry and loop shape", ipse_shape);
    criterion(6, "PPL oracle", ppl_oracle);
    criterion(7, "filter and partition", filter_partition);
    criterion(8, "RM evaluation metrics", rm_metrics);
    criterion(9, "rubric parsing round trip", rubric_round_trip);
    criterion(10, "end-to-end determinism", pipeline_determinism);
    criterion(11, "report fidelity", report_fidelity);
    criterion(12, "rollout termination", rollout_termination);
    std::printf("%d/12 criteria passed\n", 12 - failures);
    return failures == 0 ? 0 : 1;
}
