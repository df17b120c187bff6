#include "muse/commands.hpp"

#include "muse/error.hpp"
#include "muse/parallel.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>

namespace muse::app {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// File helpers

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (text::is_blank(line)) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception&) {
            fail(ErrorKind::FormatError, path.string() + ":" + std::to_string(n) + ": invalid JSON");
        }
    }
    return out;
}

void write_text(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
        out << content;
        if (!out) fail(ErrorKind::IoError, "write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

void write_jsonl(const fs::path& path, const std::vector<json>& lines) {
    std::string body;
    for (const auto& l : lines) body += l.dump() + "\n";
    write_text(path, body);
}

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        fail(ErrorKind::FormatError, path.string() + ": invalid JSON");
    }
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(name, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        throw StageError(name, e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------

RunContext open_run(const RunConfig& config, const std::string& transcript_name) {
    RunContext run;
    run.config = config;
    run.dir = run_directory(config);
    for (const char* sub : {"transcripts", "lineages", "datasets", "trajectories", "reports"}) {
        fs::create_directories(run.dir / sub);
    }
    write_text(run.dir / "config.json", config.canonical.dump(2) + "\n");
    run.transcript = std::make_shared<Transcript>(run.dir / "transcripts" / (transcript_name + ".jsonl"));
    run.gateway = build_gateway(config, run.transcript);
    run.prompts = load_prompts(config);
    return run;
}

fs::path lineage_records_path(const std::string& session_id) {
    return fs::path("lineages") / (text::safe_filename(session_id) + ".jsonl");
}

fs::path lineage_summary_path(const std::string& session_id) {
    return fs::path("lineages") / (text::safe_filename(session_id) + ".lineage.json");
}

std::vector<DialogueSession> load_corpus(const RunConfig& config, corpus::IngestReport* report) {
    if (config.corpus.empty()) fail(ErrorKind::ConfigError, "corpus.paths is empty");
    auto sessions = corpus::ingest(config.corpus, report);
    auto kept = corpus::filter_min_turns(sessions, config.min_turns);
    if (kept.empty()) {
        fail(ErrorKind::EmptyCorpus, std::to_string(sessions.size()) + " session(s) ingested, none with at least " +
                                         std::to_string(config.min_turns) + " turns");
    }
    return kept;
}

// ---------------------------------------------------------------------------
// ipse

IpseResult cmd_ipse(RunContext& run, const std::vector<DialogueSession>& sessions) {
    ipse::Options options;
    options.rounds = run.config.ipse_rounds;
    options.selection = run.config.ipse_selection;
    options.prompts = run.prompts;

    IpseResult result;
    std::mutex mutex;
    parallel_for(sessions.size(), run.config.workers, [&](std::size_t i) {
        const auto& session = sessions[i];
        const auto summary = run.dir / lineage_summary_path(session.id);
        if (fs::exists(summary)) {
            std::lock_guard lock(mutex);
            ++result.skipped;
            return;
        }
        const auto records = run.dir / lineage_records_path(session.id);
        auto checkpoint = [&records](const ipse::ProfileLineage& lineage) {
            std::vector<json> lines;
            for (const auto& p : lineage.profiles) lines.push_back(profile_to_json(p));
            write_jsonl(records, lines);
        };
        try {
            const auto lineage = ipse::evolve(session, *run.gateway, options, checkpoint);
            checkpoint(lineage);
            write_text(summary, ipse::lineage_to_json(lineage).dump(2) + "\n");
            std::lock_guard lock(mutex);
            ++result.completed;
        } catch (const Error& e) {
            spdlog::error("ipse: session '{}' failed: {}", session.id, e.what());
            std::lock_guard lock(mutex);
            result.failed.push_back(session.id + ": " + e.what());
        }
    });
    std::sort(result.failed.begin(), result.failed.end());
    return result;
}

std::vector<UserProfile> final_profiles(const RunContext& run, const std::vector<std::string>& session_ids) {
    std::vector<UserProfile> out;
    for (const auto& id : session_ids) {
        const auto path = run.dir / lineage_summary_path(id);
        if (!fs::exists(path)) fail(ErrorKind::IoError, "no finished lineage for session '" + id + "' (run ipse first)");
        out.push_back(ipse::lineage_from_json(read_json(path)).final_profile());
    }
    return out;
}

// ---------------------------------------------------------------------------
// split / sft

corpus::CorpusPartition cmd_split(RunContext& run, const std::vector<DialogueSession>& sessions) {
    corpus::DifficultyOptions options;
    options.weights = run.config.difficulty_weights;
    options.prompts = run.prompts;

    std::vector<corpus::DifficultyScore> scores(sessions.size());
    parallel_for(sessions.size(), run.config.workers,
                 [&](std::size_t i) { scores[i] = corpus::score_difficulty(sessions[i], *run.gateway, options); });

    std::vector<json> lines;
    for (const auto& s : scores) lines.push_back(corpus::difficulty_to_json(s));
    write_jsonl(run.dir / "datasets" / "difficulty.jsonl", lines);

    corpus::CorpusPartition partition;
    if (run.config.per_domain) {
        std::map<std::string, Domain> domains;
        for (const auto& s : sessions) domains[s.id] = s.domain;
        partition = corpus::partition_per_domain(scores, domains, run.config.rl_fraction);
    } else {
        partition = corpus::partition(scores, run.config.rl_fraction);
    }
    write_text(run.dir / "datasets" / "partition.json",
               corpus::partition_to_json(partition, run.config.rl_fraction).dump(2) + "\n");
    return partition;
}

std::size_t cmd_sft_build(RunContext& run, const std::vector<DialogueSession>& sessions, const fs::path& out_relative) {
    std::vector<json> lines{corpus::sft_file_header()};
    for (const auto& session : sessions) {
        const auto profile = final_profiles(run, {session.id}).front();
        for (const auto& r : corpus::build_sft_records(profile, session)) lines.push_back(corpus::sft_record_to_json(r));
    }
    write_jsonl(run.dir / out_relative, lines);
    return lines.size() - 1;
}

// ---------------------------------------------------------------------------
// reward model

namespace {

std::vector<rubric::RmExample> read_examples(const fs::path& path) {
    std::vector<rubric::RmExample> out;
    for (const auto& j : read_jsonl(path)) out.push_back(rubric::rm_example_from_json(j));
    return out;
}

}  // namespace

RmBuildResult cmd_rm_build(RunContext& run, const fs::path& examples) {
    const auto ex = read_examples(examples);
    const auto sets = rubric::build_rm_training_sets(ex, run.prompts);
    write_jsonl(run.dir / "datasets" / "rm_warmup.jsonl", sets.sft);
    write_jsonl(run.dir / "datasets" / "rm_rlvr.jsonl", sets.rlvr);
    return RmBuildResult{sets.sft.size(), sets.rlvr.size()};
}

rubric::RmEvalReport cmd_rm_eval(RunContext& run, const fs::path& examples, const std::optional<fs::path>& predictions) {
    const auto ex = read_examples(examples);
    std::vector<rubric::RubricJudgment> golds;
    for (const auto& e : ex) golds.push_back(e.gold);

    std::vector<rubric::RubricJudgment> preds;
    if (predictions) {
        for (const auto& j : read_jsonl(*predictions)) {
            preds.push_back(j.is_string() ? rubric::parse_judgment(j.get<std::string>()) : rubric::judgment_from_json(j));
        }
    } else {
        preds.resize(ex.size());
        parallel_for(ex.size(), run.config.workers, [&](std::size_t i) {
            preds[i] = rubric::judge(*run.gateway, ex[i].profile_text, ex[i].context, ex[i].candidate_utterance,
                                     "rm.eval", ModelRole::Reward, run.prompts);
        });
    }
    const auto report = rubric::evaluate_rm(preds, golds);
    write_text(run.dir / "reports" / "rm_eval.json", rubric::rm_report_to_json(report).dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// grpo

json cmd_grpo_collect(RunContext& run, const std::vector<UserProfile>& profiles) {
    grpo::CollectOptions options;
    options.group_size = run.config.group_size;
    options.eps = run.config.grpo_eps;
    options.limits = run.config.rollout;
    options.assistant_instruction = run.config.assistant_instruction;
    options.workers = run.config.workers;
    const auto reward = grpo::rubric_reward(*run.gateway, run.prompts);

    std::vector<grpo::TrajectoryGroup> groups;
    for (const auto& p : profiles) {
        options.group_id = p.id;
        groups.push_back(grpo::collect_group(p, *run.gateway, reward, options));
    }
    return grpo::export_trajectories(groups, run.dir / "trajectories" / "grpo.jsonl");
}

// ---------------------------------------------------------------------------
// eval

eval::EvalReport cmd_eval(RunContext& run, const EvalInputs& inputs) {
    const auto& cfg = run.config;
    auto& gateway = *run.gateway;
    eval::EvalReport report;
    report.model = inputs.model;

    std::optional<eval::Embedder> embedder;
    if (!cfg.embedder_command.empty()) embedder = eval::subprocess_embedder(cfg.embedder_command);

    if (inputs.generated) {
        std::vector<eval::UtteranceEvalRecord> records;
        for (const auto& j : read_jsonl(*inputs.generated)) records.push_back(eval::record_from_json(j));
        if (records.empty()) fail(ErrorKind::EmptySet, inputs.generated->string() + " has no records");
        if (!cfg.detector_command.empty()) {
            report.ai_prob_pct = eval::ai_probability(records, eval::subprocess_detector(cfg.detector_command));
        }
        if (embedder) report.style_sim = eval::style_similarity(records, *embedder);
        if (gateway.has(ModelRole::Judge)) {
            std::vector<eval::UtteranceJudgment> judgments(records.size());
            parallel_for(records.size(), cfg.workers,
                         [&](std::size_t i) { judgments[i] = eval::judge_utterance(gateway, records[i], run.prompts); });
            eval::add_utterance_judgments(report, judgments);
        }
    }

    if (inputs.pairs) {
        if (!embedder) fail(ErrorKind::ConfigError, "AVA needs eval.embedder");
        std::vector<eval::AuthorPair> pairs;
        for (const auto& j : read_jsonl(*inputs.pairs)) pairs.push_back(eval::pair_from_json(j));
        double threshold = 0.0;
        if (cfg.ava_threshold) {
            threshold = *cfg.ava_threshold;
        } else if (inputs.dev_pairs) {
            std::vector<eval::AuthorPair> dev;
            for (const auto& j : read_jsonl(*inputs.dev_pairs)) dev.push_back(eval::pair_from_json(j));
            threshold = eval::calibrate_threshold(dev, *embedder);
            spdlog::info("eval: calibrated AVA threshold {:.6f} on {} dev pairs", threshold, dev.size());
        } else {
            fail(ErrorKind::ConfigError, "AVA needs eval.ava_threshold or labelled dev pairs");
        }
        report.ava = eval::author_verification_accuracy(pairs, *embedder, threshold);
    }

    std::vector<std::pair<UserProfile, SimulatedDialogue>> sessions;
    if (inputs.dialogues) {
        for (const auto& j : read_jsonl(*inputs.dialogues)) {
            sessions.emplace_back(profile_from_json(j.at("profile")), dialogue_from_json(j.at("dialogue")));
        }
    }
    if (inputs.profiles) {
        std::vector<UserProfile> profiles;
        for (const auto& j : read_jsonl(*inputs.profiles)) profiles.push_back(profile_from_json(j));
        const auto user = gateway_user_policy(gateway, ModelRole::Simulator, eval::tags::kUser);
        const auto assistant =
            gateway_assistant_policy(gateway, ModelRole::Assistant, cfg.assistant_instruction, eval::tags::kAssistant);
        std::vector<SimulatedDialogue> rolled(profiles.size());
        parallel_for(profiles.size(), cfg.workers, [&](std::size_t i) {
            rolled[i] = run_dialogue(user, assistant, profiles[i], cfg.rollout, profiles[i].id + "#eval");
        });
        std::vector<json> lines;
        for (std::size_t i = 0; i < profiles.size(); ++i) {
            lines.push_back({{"profile", profile_to_json(profiles[i])}, {"dialogue", dialogue_to_json(rolled[i])}});
            if (rolled[i].turns.empty()) {
                spdlog::warn("eval: rollout for '{}' produced no turns, not judged", profiles[i].id);
                continue;
            }
            sessions.emplace_back(profiles[i], std::move(rolled[i]));
        }
        write_jsonl(run.dir / "reports" / "eval_dialogues.jsonl", lines);
    }
    if (!sessions.empty()) {
        if (!gateway.has(ModelRole::Judge)) fail(ErrorKind::ConfigError, "session evaluation needs a judge backend");
        std::vector<eval::SessionJudgment> judgments(sessions.size());
        parallel_for(sessions.size(), cfg.workers, [&](std::size_t i) {
            judgments[i] = eval::judge_session(gateway, sessions[i].second, sessions[i].first, run.prompts);
        });
        eval::add_session_judgments(report, judgments);
    }

    report = eval::build_report(std::move(report));
    write_text(run.dir / "reports" / "eval.json", eval::report_to_json(report).dump(2) + "\n");
    write_text(run.dir / "reports" / "eval.md", eval::render_markdown(report));
    return report;
}

// ---------------------------------------------------------------------------
// pipeline

json build_manifest(const fs::path& run_dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = entry.path().lexically_relative(run_dir).generic_string();
        if (rel == "manifest.json" || rel.ends_with(".tmp")) continue;
        paths.push_back(rel);
    }
    std::sort(paths.begin(), paths.end());
    json files = json::array();
    for (const auto& rel : paths) {
        std::ifstream in(run_dir / rel, std::ios::binary);
        std::stringstream buffer;
        buffer << in.rdbuf();
        const auto content = buffer.str();
        files.push_back({{"path", rel}, {"sha256", text::sha256_hex(content)}, {"bytes", content.size()}});
    }
    return json{{"run_id", run_dir.filename().string()}, {"files", std::move(files)}};
}

json cmd_pipeline(RunContext& run) {
    corpus::IngestReport report;
    const auto ingested = stage("ingest", [&] {
        if (run.config.corpus.empty()) fail(ErrorKind::ConfigError, "corpus.paths is empty");
        auto sessions = corpus::ingest(run.config.corpus, &report);
        corpus::write_sessions(run.dir / "datasets" / "sessions.jsonl", sessions);
        return sessions;
    });

    const auto sessions = stage("filter", [&] {
        auto kept = corpus::filter_min_turns(ingested, run.config.min_turns);
        if (kept.empty()) {
            fail(ErrorKind::EmptyCorpus, std::to_string(ingested.size()) + " session(s) ingested, none with at least " +
                                             std::to_string(run.config.min_turns) + " turns");
        }
        corpus::write_sessions(run.dir / "datasets" / "sessions.filtered.jsonl", kept);
        return kept;
    });
    spdlog::info("pipeline: {} session(s) ingested, {} kept", ingested.size(), sessions.size());

    stage("ipse", [&] {
        const auto r = cmd_ipse(run, sessions);
        spdlog::info("pipeline: ipse completed {}, skipped {}, failed {}", r.completed, r.skipped, r.failed.size());
        if (!r.failed.empty()) {
            fail(ErrorKind::BackendUnavailable, std::to_string(r.failed.size()) + " session(s) failed, first: " + r.failed.front());
        }
        return 0;
    });

    const auto partition = stage("split", [&] { return cmd_split(run, sessions); });

    stage("sft", [&] {
        std::vector<DialogueSession> sft;
        for (const auto& s : sessions) {
            if (partition.sft_ids.contains(s.id)) sft.push_back(s);
        }
        return cmd_sft_build(run, sft);
    });

    if (run.config.grpo_enabled && !partition.rl_ids.empty()) {
        stage("grpo", [&] {
            std::vector<std::string> ids;
            for (const auto& s : sessions) {
                if (partition.rl_ids.contains(s.id)) ids.push_back(s.id);
            }
            return cmd_grpo_collect(run, final_profiles(run, ids));
        });
    }

    return stage("manifest", [&] {
        auto manifest = build_manifest(run.dir);
        write_text(run.dir / "manifest.json", manifest.dump(2) + "\n");
        return manifest;
    });
}

// ---------------------------------------------------------------------------
// chat

UserProfile load_profile(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open profile " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    const auto content = buffer.str();
    if (path.extension() == ".json") {
        json j;
        try {
            j = json::parse(content);
        } catch (const json::exception&) {
            fail(ErrorKind::FormatError, path.string() + ": invalid JSON");
        }
        if (j.contains("profiles")) return ipse::lineage_from_json(j).final_profile();
        return profile_from_json(j);
    }
    auto body = text::trim(content);
    if (body.empty()) fail(ErrorKind::EmptyProfile, path.string() + " is empty");
    const auto stem = path.stem().string();
    return UserProfile{stem, stem, 0, std::move(body), std::nullopt};
}

namespace {

std::string grid_text(double v) { return v == 0.0 ? "0" : v == 1.0 ? "1" : "0.5"; }

}  // namespace

fs::path cmd_chat(RunContext& run, const UserProfile& profile, std::istream& in, std::ostream& out,
                  const ChatOptions& options) {
    const auto id = options.id.empty() ? profile.id + "#chat" : options.id;
    const auto user_policy = gateway_user_policy(*run.gateway, ModelRole::Simulator, "chat.user");
    auto state = start_chat(profile, run.config.rollout);

    out << "Chatting with the simulated user '" << profile.id << "'. You are the assistant; /quit to stop.\n";
    std::string reply;
    bool first = true;
    while (true) {
        std::string utterance;
        try {
            std::tie(state, utterance) = step_interactive(std::move(state), first ? std::string_view() : reply, user_policy);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::SessionTerminated) {
                out << "[error: " << e.what() << "]\n";
            }
            break;
        }
        first = false;
        if (state.terminated()) {
            out << "[session ended: " << to_string(*state.termination) << "]\n";
            break;
        }
        out << "User: " << utterance << "\n";
        if (options.score) {
            const std::vector<Utterance> context(state.history.begin(), state.history.end() - 1);
            try {
                const auto j = rubric::judge(*run.gateway, profile.text, context, utterance, "chat.score",
                                             ModelRole::Reward, run.prompts);
                out << "  (HL:" << grid_text(j.human_likeness) << " PC:" << grid_text(j.persona_consistency)
                    << " CC:" << grid_text(j.context_coherence) << ")\n";
            } catch (const Error& e) {
                out << "  (score unavailable: " << e.what() << ")\n";
            }
        }
        out << "Assistant> " << std::flush;
        if (!std::getline(in, reply) || text::trim(reply) == "/quit") {
            out << "\n[session ended by operator]\n";
            break;
        }
        while (text::is_blank(reply)) {
            out << "Assistant> " << std::flush;
            if (!std::getline(in, reply)) break;
        }
        if (text::is_blank(reply) || text::trim(reply) == "/quit") {
            out << "\n[session ended by operator]\n";
            break;
        }
    }

    const auto dialogue = chat_to_dialogue(state, id);
    const auto path = run.dir / "transcripts" / ("chat-" + text::safe_filename(profile.id) + ".json");
    write_text(path, json{{"profile", profile_to_json(profile)}, {"dialogue", dialogue_to_json(dialogue)}}.dump(2) + "\n");
    out << "Saved " << dialogue.turns.size() << " turn(s) to " << path.string() << "\n";
    return path;
}

// ---------------------------------------------------------------------------
// report

std::string cmd_report(const fs::path& report_json) {
    const auto j = read_json(report_json);
    if (j.contains("utterance") || j.contains("session")) return eval::render_markdown(eval::report_from_json(j));
    if (j.contains("dimensions") && j.contains("overall")) {
        std::string out = "| Dimension | Acc | EM |\n| --- | ---: | ---: |\n";
        for (const char* name : rubric::kDimensionNames) {
            const auto& d = j.at("dimensions").at(name);
            out += std::string("| ") + name + " | " + text::fixed(d.at("acc").get<double>(), 4) + " | " +
                   text::fixed(d.at("em").get<double>(), 4) + " |\n";
        }
        out += "| overall | " + text::fixed(j.at("overall").at("acc").get<double>(), 4) + " | " +
               text::fixed(j.at("overall").at("em").get<double>(), 4) + " |\n";
        return out;
    }
    fail(ErrorKind::FormatError, report_json.string() + " is neither an eval report nor an RM evaluation");
}

}  // namespace muse::app
