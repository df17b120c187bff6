// muse: command-line front end for the user-simulation pipeline.

#include "muse/commands.hpp"
#include "muse/error.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace muse;
using nlohmann::json;

namespace {

struct Globals {
    std::string config;
    std::optional<std::size_t> workers;
    bool verbose = false;
    bool quiet = false;
};

RunConfig configure(const Globals& g, const std::string& command) {
    if (g.config.empty()) fail(ErrorKind::ConfigError, "'" + command + "' needs --config");
    auto cfg = load_config(g.config);
    if (g.workers) cfg.workers = std::max<std::size_t>(1, *g.workers);
    return cfg;
}

std::vector<DialogueSession> sft_sessions(const app::RunContext& run, const std::vector<DialogueSession>& sessions,
                                          bool all) {
    const auto partition_path = run.dir / "datasets" / "partition.json";
    if (all || !fs::exists(partition_path)) return sessions;
    std::ifstream in(partition_path);
    const auto partition = json::parse(in);
    const auto ids = partition.at("sft_ids").get<std::set<std::string>>();
    std::vector<DialogueSession> out;
    for (const auto& s : sessions) {
        if (ids.contains(s.id)) out.push_back(s);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"muse: profile evolution, dataset construction, reward collection and evaluation for user simulators"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("-c,--config", g.config, "Run configuration (TOML)");
    app.add_option("-w,--workers", g.workers, "Override the configured worker count");
    app.add_flag("-v,--verbose", g.verbose, "Debug logging");
    app.add_flag("-q,--quiet", g.quiet, "Warnings and errors only");

    auto* ipse_cmd = app.add_subcommand("ipse", "Evolve a profile for every admitted session");
    std::vector<std::string> ipse_corpus;
    std::optional<std::size_t> ipse_rounds;
    ipse_cmd->add_option("--corpus", ipse_corpus, "Session JSONL files (override corpus.paths)");
    ipse_cmd->add_option("--rounds", ipse_rounds, "Override ipse.rounds");

    app.add_subcommand("pipeline", "ingest, filter, ipse, split, sft build, grpo collect, manifest");

    app.add_subcommand("split", "Score difficulty and partition sessions into SFT and RL");

    auto* sft_cmd = app.add_subcommand("sft-build", "Build role-reversal SFT records from finished lineages");
    bool sft_all = false;
    sft_cmd->add_flag("--all", sft_all, "Use every admitted session, ignoring the partition");

    auto* rm_build_cmd = app.add_subcommand("rm-build", "Build the reward-model warm-up and RLVR datasets");
    std::string rm_examples;
    rm_build_cmd->add_option("--examples", rm_examples, "Annotated example JSONL")->required();

    auto* rm_eval_cmd = app.add_subcommand("rm-eval", "Acc/EM of a reward model against gold judgments");
    std::string rm_eval_examples;
    std::optional<std::string> rm_predictions;
    rm_eval_cmd->add_option("--examples", rm_eval_examples, "Annotated example JSONL")->required();
    rm_eval_cmd->add_option("--predictions", rm_predictions, "Aligned judgment JSONL (default: query the reward role)");

    auto* grpo_cmd = app.add_subcommand("grpo-collect", "Collect GRPO trajectory groups");
    std::optional<std::string> grpo_profiles;
    grpo_cmd->add_option("--profiles", grpo_profiles, "Profile JSONL (default: final profiles of the RL partition)");

    auto* eval_cmd = app.add_subcommand("eval", "Utterance- and session-level evaluation");
    std::optional<std::string> ev_generated, ev_dialogues, ev_profiles, ev_pairs, ev_dev_pairs;
    std::string ev_model = "Muse";
    eval_cmd->add_option("--generated", ev_generated, "Utterance record JSONL");
    eval_cmd->add_option("--dialogues", ev_dialogues, "Finished {profile, dialogue} JSONL");
    eval_cmd->add_option("--profiles", ev_profiles, "Profile JSONL to roll out and judge");
    eval_cmd->add_option("--pairs", ev_pairs, "Author-verification pair JSONL");
    eval_cmd->add_option("--dev-pairs", ev_dev_pairs, "Labelled pairs for threshold calibration");
    eval_cmd->add_option("--model", ev_model, "Row label in the report");

    auto* chat_cmd = app.add_subcommand("chat", "Talk to a simulated user; you play the assistant");
    std::string chat_profile;
    bool chat_score = false;
    chat_cmd->add_option("--profile", chat_profile, "Profile JSON, lineage summary or plain text")->required();
    chat_cmd->add_flag("--score", chat_score, "Show rubric scores for each simulated turn");

    auto* report_cmd = app.add_subcommand("report", "Render a report JSON as markdown");
    std::string report_path;
    report_cmd->add_option("report", report_path, "reports/eval.json or reports/rm_eval.json")->required();

    CLI11_PARSE(app, argc, argv);

    auto logger = spdlog::stderr_color_mt("muse");
    spdlog::set_default_logger(logger);
    spdlog::set_level(g.verbose ? spdlog::level::debug : g.quiet ? spdlog::level::warn : spdlog::level::info);

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (command == "report") {
            std::cout << app::cmd_report(report_path);
            return 0;
        }
        auto cfg = configure(g, command);
        if (command == "ipse") {
            if (!ipse_corpus.empty()) cfg.corpus.assign(ipse_corpus.begin(), ipse_corpus.end());
            if (ipse_rounds) cfg.ipse_rounds = *ipse_rounds;
        }
        auto run = app::open_run(cfg, command);
        spdlog::info("run directory {}", run.dir.string());

        if (command == "pipeline") {
            const auto manifest = app::cmd_pipeline(run);
            std::cout << "pipeline complete: " << manifest.at("files").size() << " file(s) in "
                      << (run.dir / "manifest.json").string() << "\n";
        } else if (command == "ipse") {
            const auto r = app::cmd_ipse(run, app::load_corpus(run.config));
            std::cout << "ipse: " << r.completed << " completed, " << r.skipped << " already done, " << r.failed.size()
                      << " failed\n";
            for (const auto& f : r.failed) std::cout << "  failed " << f << "\n";
            if (!r.failed.empty()) throw app::StageError("ipse", std::to_string(r.failed.size()) + " session(s) failed");
        } else if (command == "split") {
            const auto p = app::cmd_split(run, app::load_corpus(run.config));
            std::cout << "split: " << p.sft_ids.size() << " SFT, " << p.rl_ids.size() << " RL\n";
        } else if (command == "sft-build") {
            const auto n = app::cmd_sft_build(run, sft_sessions(run, app::load_corpus(run.config), sft_all));
            std::cout << "sft-build: " << n << " record(s)\n";
        } else if (command == "rm-build") {
            const auto r = app::cmd_rm_build(run, rm_examples);
            std::cout << "rm-build: " << r.warmup << " warm-up, " << r.rlvr << " RLVR record(s)\n";
        } else if (command == "rm-eval") {
            std::optional<fs::path> preds;
            if (rm_predictions) preds = *rm_predictions;
            app::cmd_rm_eval(run, rm_eval_examples, preds);
            std::cout << app::cmd_report(run.dir / "reports" / "rm_eval.json");
        } else if (command == "grpo-collect") {
            std::vector<UserProfile> profiles;
            if (grpo_profiles) {
                for (const auto& j : app::read_jsonl(*grpo_profiles)) profiles.push_back(profile_from_json(j));
            } else {
                std::ifstream in(run.dir / "datasets" / "partition.json");
                if (!in) fail(ErrorKind::IoError, "no partition found; run split first or pass --profiles");
                const auto ids = json::parse(in).at("rl_ids").get<std::vector<std::string>>();
                profiles = app::final_profiles(run, ids);
            }
            const auto m = app::cmd_grpo_collect(run, profiles);
            std::cout << "grpo-collect: " << m.at("groups") << " group(s), " << m.at("trajectories")
                      << " trajectories, mean reward " << m.at("mean_reward") << "\n";
        } else if (command == "eval") {
            app::EvalInputs in;
            if (ev_generated) in.generated = *ev_generated;
            if (ev_dialogues) in.dialogues = *ev_dialogues;
            if (ev_profiles) in.profiles = *ev_profiles;
            if (ev_pairs) in.pairs = *ev_pairs;
            if (ev_dev_pairs) in.dev_pairs = *ev_dev_pairs;
            in.model = ev_model;
            std::cout << eval::render_markdown(app::cmd_eval(run, in));
        } else if (command == "chat") {
            app::ChatOptions options;
            options.score = chat_score;
            app::cmd_chat(run, app::load_profile(chat_profile), std::cin, std::cout, options);
        }
    } catch (const app::StageError& e) {
        std::cerr << "muse: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "muse: stage '" << command << "' failed: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "muse: stage '" << command << "' failed: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
