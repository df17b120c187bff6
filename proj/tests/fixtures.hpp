#pragma once

// On-disk fixtures shared by the command tests and the acceptance binary.

#include "support.hpp"

#include "muse/rollout.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

namespace testing {

/// Five four-turn sessions plus a two-turn one the filter drops.
inline void write_pipeline_corpus(const std::filesystem::path& file, std::size_t sessions = 5) {
    std::string body;
    for (std::size_t i = 0; i < sessions; ++i) {
        body += muse::session_to_json(make_session("s" + std::to_string(i), 4)).dump() + "\n";
    }
    body += muse::session_to_json(make_session("short", 2)).dump() + "\n";
    write_file(file, body);
}

/// Script serving every stage of the pipeline. Session s2 is the hardest.
inline json pipeline_script() {
    return json::array({
        {{"tag", "ipse.extract"}, {"response", "You are a careful buyer comparing plans."}, {"times", 0}},
        {{"tag", "ipse.step1.user"}, {"response", "I want the cheapest plan."}, {"times", 0}},
        {{"tag", "ipse.step1.assistant"}, {"response", "The basic plan costs less."}, {"times", 0}},
        {{"tag", "ipse.step2.optimize"},
         {"response", "CRITIQUE: too direct ||| PROFILE: You are a careful buyer. Do not reveal your budget initially."},
         {"times", 0}},
        {{"tag", "corpus.difficulty.*"}, {"contains", "of s2"}, {"response", "SCORE: 1"}, {"times", 0}},
        {{"tag", "corpus.difficulty.*"}, {"contains", "of s4"}, {"response", "SCORE: 0.75"}, {"times", 0}},
        {{"tag", "corpus.difficulty.*"}, {"response", "SCORE: 0.25"}, {"times", 0}},
        {{"tag", "grpo.rollout.user"}, {"response", "Is there a discount?"}, {"times", 3}},
        {{"tag", "grpo.rollout.user"}, {"response", "ok"}, {"times", 0}},
        {{"tag", "grpo.rollout.assistant"}, {"response", "Yes, ten percent."}, {"times", 0}},
        {{"tag", "grpo.reward"}, {"contains", "discount"}, {"response", "RATIONALE: natural\nHL:1 PC:1 CC:1"}, {"times", 0}},
        {{"tag", "grpo.reward"}, {"response", "RATIONALE: flat\nHL:0.5 PC:0.5 CC:1"}, {"times", 0}},
    });
}

inline std::string role_backends(const std::string& script) {
    std::string out;
    for (const char* role : {"simulator", "assistant", "reasoner", "judge", "reward"}) {
        out += std::string("[backends.") + role + "]\nkind = \"scripted\"\nscript = \"" + script + "\"\n\n";
    }
    return out;
}

/// A self-contained pipeline run directory: corpus, script and config.toml.
inline std::filesystem::path write_pipeline_fixture(const std::filesystem::path& dir, const std::string& extra = "") {
    write_pipeline_corpus(dir / "corpus.jsonl");
    write_file(dir / "script.json", pipeline_script().dump(2));
    const std::string config = "version = 1\n\n" + role_backends("script.json") +
                               "[gateway]\nbase_delay_ms = 0\n\n"
                               "[rollout]\nmax_turns = 2\n\n"
                               "[grpo]\ngroup_size = 4\n\n"
                               "[corpus]\npaths = [\"corpus.jsonl\"]\nmin_turns = 4\n\n"
                               "[paths]\noutput_dir = \"runs\"\n" +
                               extra;
    write_file(dir / "config.toml", config);
    return dir / "config.toml";
}

// ---------------------------------------------------------------------------
// Evaluation inputs whose aggregates equal the printed Muse row of the
// main results table. Judge scores sit on the 0.05 grid; the breakpoints
// below are the counts that make each 500-item mean land on the row value.

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Table2Fixture {
    std::filesystem::path config;
    std::filesystem::path generated;
    std::filesystem::path dialogues;
    std::filesystem::path pairs;
};

inline json utterance_judge_entries() {
    // {count, CR, RF, GC, LN}: breaks at 120, 196, 263, 276 and 500.
    const double rows[][5] = {{120, 0.95, 1.0, 0.90, 1.0},
                              {76, 0.95, 1.0, 0.90, 0.95},
                              {67, 0.90, 1.0, 0.90, 0.95},
                              {13, 0.90, 1.0, 0.85, 0.95},
                              {224, 0.90, 0.95, 0.85, 0.95}};
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"tag", "eval.judge.utterance"},
                       {"times", static_cast<int>(r[0])},
                       {"response", "CR:" + fmt17(r[1]) + " RF:" + fmt17(r[2]) + " GC:" + fmt17(r[3]) + " LN:" + fmt17(r[4])}});
    }
    return out;
}

inline json session_judge_entries() {
    // {count, PC, GE, DC, CC}: breaks at 185, 239, 378, 467 and 500.
    const double rows[][5] = {{185, 0.85, 0.80, 0.90, 0.90},
                              {54, 0.85, 0.80, 0.85, 0.90},
                              {139, 0.85, 0.80, 0.85, 0.85},
                              {89, 0.80, 0.80, 0.85, 0.85},
                              {33, 0.80, 0.75, 0.85, 0.85}};
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"tag", "eval.judge.session"},
                       {"times", static_cast<int>(r[0])},
                       {"response", "PC:" + fmt17(r[1]) + " GE:" + fmt17(r[2]) + " DC:" + fmt17(r[3]) + " CC:" + fmt17(r[4])}});
    }
    return out;
}

inline Table2Fixture write_table2_fixture(const std::filesystem::path& dir, const std::string& plugin) {
    constexpr int kItems = 500;
    constexpr int kPairs = 10000;
    constexpr int kCorrectPairs = 6489;
    const double style = 0.7534;

    Table2Fixture f;
    f.generated = dir / "generated.jsonl";
    f.dialogues = dir / "dialogues.jsonl";
    f.pairs = dir / "pairs.jsonl";

    const std::string reference = "vec:" + fmt17(style) + "," + fmt17(std::sqrt(1.0 - style * style));
    std::string body;
    for (int i = 0; i < kItems; ++i) {
        body += json{{"id", "u" + std::to_string(i)},
                     {"generated", "vec:1,0"},
                     {"reference", reference},
                     {"profile_text", "A price-sensitive shopper."},
                     {"context", json::array({{{"role", "user"}, {"content", "Hi."}}, {{"role", "assistant"}, {"content", "How can I help?"}}})}}
                    .dump() +
                "\n";
    }
    write_file(f.generated, body);

    body.clear();
    for (int i = 0; i < kItems; ++i) {
        auto profile = make_profile("d" + std::to_string(i), "A price-sensitive shopper.");
        muse::SimulatedDialogue d;
        d.id = "d" + std::to_string(i);
        d.profile_id = profile.id;
        d.turns = make_session(d.id, 2).turns;
        body += json{{"profile", muse::profile_to_json(profile)}, {"dialogue", muse::dialogue_to_json(d)}}.dump() + "\n";
    }
    write_file(f.dialogues, body);

    // Every pair shares an author; the first 6489 embed identically and are
    // recognized, the rest are orthogonal and missed at threshold 0.5.
    body.clear();
    for (int i = 0; i < kPairs; ++i) {
        const bool hit = i < kCorrectPairs;
        body += json{{"a", "vec:1,0"}, {"b", hit ? "vec:1,0" : "vec:0,1"}, {"same_author", true}}.dump() + "\n";
    }
    write_file(f.pairs, body);

    json script = utterance_judge_entries();
    for (auto& e : session_judge_entries()) script.push_back(e);
    write_file(dir / "judge.json", script.dump(2));

    const std::string q = "'" + plugin + "'";
    f.config = dir / "config.toml";
    write_file(f.config, "version = 1\n\n[backends.judge]\nscript = \"judge.json\"\n\n"
                         "[gateway]\nbase_delay_ms = 0\n\n"
                         "[eval]\ndetector = \"" + q + " detector 0.3118\"\nembedder = \"" + q + " embedder\"\n"
                         "ava_threshold = 0.5\n\n"
                         "[paths]\noutput_dir = \"runs\"\n");
    return f;
}

}  // namespace testing
