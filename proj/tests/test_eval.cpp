#include "support.hpp"

#include "muse/eval.hpp"
#include "muse/text.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace muse;
using testing::json;
using testing::kind_of;

namespace {

std::vector<eval::UtteranceEvalRecord> records(std::size_t n) {
    std::vector<eval::UtteranceEvalRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        eval::UtteranceEvalRecord r;
        r.id = "r" + std::to_string(i);
        r.generated = "generated " + std::to_string(i);
        r.reference = "reference " + std::to_string(i);
        r.context.profile = testing::make_profile("p");
        out.push_back(r);
    }
    return out;
}

// Published Muse row of the main results table.
eval::EvalReport table2_muse() {
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
    return r;
}

std::string fixture_command(const std::string& args) { return std::string("'") + MUSE_PLUGIN_FIXTURE + "' " + args; }

}  // namespace

TEST_CASE("ai_probability") {
    const auto rs = records(10);
    CHECK(eval::ai_probability(rs, [](std::string_view) { return 0.5; }) == 50.0);
    CHECK(eval::ai_probability(rs, [](std::string_view) { return 0.0; }) == 0.0);
    CHECK(kind_of([&] { eval::ai_probability(rs, [](std::string_view) { return 1.5; }); }) == ErrorKind::OutOfRange);
    CHECK(kind_of([&] { eval::ai_probability({}, [](std::string_view) { return 0.5; }); }) == ErrorKind::EmptySet);

    // Monotone and order-independent.
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::map<std::string, double> probs;
    for (const auto& r : rs) probs[r.generated] = u(rng);
    auto detector = [&](std::string_view t) { return probs.at(std::string(t)); };
    const double base = eval::ai_probability(rs, detector);
    auto shuffled = rs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(eval::ai_probability(shuffled, detector) == doctest::Approx(base).epsilon(1e-12));
    probs[rs[3].generated] *= 0.5;
    CHECK(eval::ai_probability(rs, detector) <= base);
}

TEST_CASE("cosine and style similarity") {
    const std::vector<double> x{1, 0}, y{0, 1}, neg{-1, 0}, z{0, 0};
    CHECK(eval::cosine(x, x) == 1.0);
    CHECK(eval::cosine(x, y) == 0.0);
    CHECK(eval::cosine(x, neg) == -1.0);
    CHECK(kind_of([&] { eval::cosine(x, z); }) == ErrorKind::ZeroVector);
    CHECK(kind_of([&] { eval::cosine(x, std::vector<double>{1, 0, 0}); }) == ErrorKind::LengthMismatch);

    auto rs = records(2);
    auto same = [](std::string_view) { return std::vector<double>{0.3, 0.4}; };
    CHECK(eval::style_similarity(rs, same) == doctest::Approx(1.0));
    auto ortho = [](std::string_view t) {
        return t.starts_with("generated") ? std::vector<double>{1, 0} : std::vector<double>{0, 1};
    };
    CHECK(eval::style_similarity(rs, ortho) == 0.0);
    auto anti = [](std::string_view t) {
        return t.starts_with("generated") ? std::vector<double>{1, 2} : std::vector<double>{-1, -2};
    };
    CHECK(eval::style_similarity(rs, anti) == doctest::Approx(-1.0));
    CHECK(kind_of([&] { eval::style_similarity({}, same); }) == ErrorKind::EmptySet);
}

TEST_CASE("author verification accuracy") {
    // Embeddings: "vec:" texts through the fixture format, parsed in-process here.
    auto embed = [](std::string_view t) {
        std::vector<double> v;
        std::string s(t.substr(4));
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
        return v;
    };
    const std::vector<eval::AuthorPair> pairs{
        {"vec:1,0", "vec:1,0.1", true},   // cos ~0.995
        {"vec:1,0", "vec:0,1", false},    // cos 0
        {"vec:1,1", "vec:1,0.9", true},   // cos ~0.9986
        {"vec:1,0", "vec:0.6,0.8", false},  // cos 0.6
    };
    CHECK(eval::author_verification_accuracy(pairs, embed, 0.9) == 100.0);

    // Hand enumeration at threshold 0.5: pairs 1 and 3 correct, pair 2 correct,
    // pair 4 (cos 0.6, different authors) misclassified -> 3 of 4.
    std::size_t correct = 0;
    for (const auto& p : pairs) {
        const bool predicted = eval::cosine(embed(p.a), embed(p.b)) >= 0.5;
        correct += predicted == p.same_author;
    }
    REQUIRE(correct == 3);
    CHECK(eval::author_verification_accuracy(pairs, embed, 0.5) == 75.0);

    const std::vector<eval::AuthorPair> all_same{{"vec:1,0", "vec:1,0.2", true}, {"vec:0,1", "vec:0.1,1", true}};
    CHECK(eval::author_verification_accuracy(all_same, embed, 1.0) == 0.0);

    const double t = eval::calibrate_threshold(pairs, embed);
    CHECK(eval::author_verification_accuracy(pairs, embed, t) == 100.0);
    CHECK(t > 0.6);
    CHECK(t <= eval::cosine(embed(pairs[0].a), embed(pairs[0].b)));

    const auto back = eval::pair_from_json(eval::pair_to_json(pairs[0]));
    CHECK(back.a == pairs[0].a);
    CHECK(back.same_author);
    CHECK(kind_of([&] { eval::author_verification_accuracy({}, embed, 0.5); }) == ErrorKind::EmptySet);
}

TEST_CASE("subprocess plugins") {
    auto detector = eval::subprocess_detector(fixture_command("detector 0.3118"));
    CHECK(detector("anything") == 0.3118);
    CHECK(eval::ai_probability(records(5), detector) == doctest::Approx(31.18).epsilon(1e-12));

    auto embedder = eval::subprocess_embedder(fixture_command("embedder"));
    CHECK(embedder("vec:1,2,3") == std::vector<double>{1, 2, 3});
    const auto hist = embedder("abca");
    REQUIRE(hist.size() == 26);
    CHECK(hist[0] == 2.0);

    auto broken = eval::subprocess_detector("exit 3");
    CHECK(kind_of([&] { broken("x"); }) == ErrorKind::BackendUnavailable);
}

TEST_CASE("judge output parsing") {
    const auto t = eval::parse_utterance_judgment("(0.9, 1.0, 0.8, 0.95)");
    CHECK(t.contextual_relevance == 0.9);
    CHECK(t.response_fidelity == 1.0);
    CHECK(t.goal_contribution == 0.8);
    CHECK(t.linguistic_naturalness == 0.95);

    const auto labelled = eval::parse_utterance_judgment("thinking\nCR: 0.85 RF=0.9 GC：0.7 LN:1");
    CHECK(labelled.contextual_relevance == 0.85);
    CHECK(labelled.goal_contribution == 0.7);
    CHECK(kind_of([] { eval::parse_utterance_judgment("CR:1.2 RF:1 GC:1 LN:1"); }) == ErrorKind::ParseFailure);
    CHECK(kind_of([] { eval::parse_utterance_judgment("CR:0.93 RF:1 GC:1 LN:1"); }) == ErrorKind::ParseFailure);
    CHECK(kind_of([] { eval::parse_utterance_judgment("CR:1 RF:1 GC:1"); }) == ErrorKind::ParseFailure);

    const auto s = eval::parse_session_judgment("PC:0.8 GE:0.8 DC:0.9 CC:0.7");
    CHECK(s.avg == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(eval::parse_session_judgment("(1, 1, 1, 1)").avg == 1.0);
}

TEST_CASE("judges run at temperature zero and are deterministic") {
    auto rs = records(1);
    rs[0].context.history = {{Role::User, "earlier", 0}, {Role::Assistant, "reply", 0}};
    std::vector<eval::UtteranceJudgment> out;
    for (int run = 0; run < 2; ++run) {
        auto gw = testing::scripted_gateway(json::array({{{"tag", "eval.judge.utterance"}, {"response", "(0.9, 1.0, 0.8, 0.95)"}}}));
        out.push_back(eval::judge_utterance(*gw, rs[0]));
        const auto e = gw->transcript().entries().at(0);
        CHECK(e["request"]["temperature"] == 0.0);
        CHECK(e["request"]["role"] == "judge");
        CHECK(text::contains(e["request"]["messages"][0]["content"].get<std::string>(), "earlier"));
    }
    CHECK(out[0].response_fidelity == out[1].response_fidelity);
    CHECK(out[0].linguistic_naturalness == 0.95);

    auto retry = testing::scripted_gateway(json::array({
        {{"tag", "eval.judge.session"}, {"response", "I liked it"}},
        {{"tag", "eval.judge.session.retry"}, {"response", "PC:1 GE:1 DC:1 CC:1"}},
    }));
    SimulatedDialogue d;
    d.id = "d";
    d.turns = testing::make_session("d", 2).turns;
    CHECK(eval::judge_session(*retry, d, testing::make_profile("d")).avg == 1.0);
}

TEST_CASE("published Muse row through build_report") {
    const auto report = eval::build_report(table2_muse());
    REQUIRE(report.session_avg);
    CHECK(std::abs(*report.session_avg - 0.8442) <= 5e-5);

    const auto md = eval::render_markdown(report);
    CHECK(text::contains(md, "| Muse | 31.18 | 0.7534 | 64.89 | 0.9196 | 0.9776 | 0.8763 | 0.9620 |"));
    CHECK(text::contains(md, "| Muse | 0.8378 | 0.7967 | 0.8685 | 0.8739 | 0.8442 |"));
    CHECK(text::contains(md, "### Panel A: Utterance-Level Evaluation"));
    CHECK(text::contains(md, "### Panel B: Session-Level Evaluation"));

    const auto from_json = eval::report_from_json(eval::report_to_json(report));
    CHECK(eval::render_markdown(from_json) == md);
    const auto from_md = eval::parse_markdown(md);
    CHECK(eval::report_to_json(eval::parse_markdown(eval::render_markdown(from_md))) == eval::report_to_json(from_md));
    CHECK(*from_md.ava == 64.89);
    CHECK(*from_md.session_avg == 0.8442);

    auto no_ava = report;
    no_ava.ava.reset();
    const auto md2 = eval::render_markdown(no_ava);
    CHECK(text::contains(md2, "| 0.7534 | — | 0.9196 |"));
    CHECK_FALSE(eval::parse_markdown(md2).ava.has_value());
    CHECK(eval::report_to_json(no_ava)["utterance"]["ava"].is_null());

    auto partial = table2_muse();
    partial.constraint_compliance.reset();
    CHECK_FALSE(eval::build_report(partial).session_avg.has_value());
    CHECK(kind_of([] { eval::parse_markdown("nothing here"); }) == ErrorKind::FormatError);
}

TEST_CASE("judgment aggregation") {
    std::vector<eval::SessionJudgment> s{{0.8, 0.8, 0.9, 0.7, 0.8}, {1, 1, 1, 1, 1}};
    eval::EvalReport r;
    eval::add_session_judgments(r, s);
    r = eval::build_report(r);
    CHECK(*r.persona_consistency == doctest::Approx(0.9));
    CHECK(*r.session_avg == doctest::Approx(0.9));
    std::vector<eval::UtteranceJudgment> u{{1, 1, 1, 1}, {0.5, 0, 1, 0.5}};
    eval::add_utterance_judgments(r, u);
    CHECK(*r.response_fidelity == 0.5);
    CHECK(kind_of([&] { eval::add_utterance_judgments(r, {}); }) == ErrorKind::EmptySet);
}

TEST_CASE("utterance record JSON") {
    json j{{"id", "x"},
           {"generated", "hi"},
           {"reference", "hello"},
           {"profile_text", "persona"},
           {"context", json::array({{{"role", "user"}, {"content", "a"}}, {{"role", "assistant"}, {"content", "b"}}})}};
    const auto r = eval::record_from_json(j);
    CHECK(r.context.profile.text == "persona");
    CHECK(r.context.history.size() == 2);
    CHECK(eval::record_from_json(eval::record_to_json(r)).generated == "hi");
    j["generated"] = " ";
    CHECK(kind_of([&] { eval::record_from_json(j); }) == ErrorKind::FormatError);
}
