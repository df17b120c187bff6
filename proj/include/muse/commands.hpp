#pragma once

// Command implementations behind the `muse` CLI. Each command works inside
// runs/<run-id>/ and records its model traffic in transcripts/<command>.jsonl,
// which doubles as the replay cache when the command is rerun.

#include "muse/config.hpp"
#include "muse/corpus.hpp"
#include "muse/eval.hpp"
#include "muse/grpo.hpp"
#include "muse/ipse.hpp"
#include "muse/rubric.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace muse::app {

/// A failure attributed to one pipeline stage.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& message)
        : std::runtime_error("stage '" + stage + "' failed: " + message), stage_(std::move(stage)) {}

    [[nodiscard]] const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Run directory, transcript and gateway for one command.
struct RunContext {
    RunConfig config;
    std::filesystem::path dir;
    std::shared_ptr<Transcript> transcript;
    std::unique_ptr<Gateway> gateway;
    PromptLibrary prompts;
};

/// Creates the run layout and opens transcripts/<transcript_name>.jsonl.
RunContext open_run(const RunConfig& config, const std::string& transcript_name);

/// Relative path of each lineage artifact for a session.
std::filesystem::path lineage_records_path(const std::string& session_id);
std::filesystem::path lineage_summary_path(const std::string& session_id);

/// Loads and filters the configured corpus. Throws EmptyCorpus when nothing survives.
std::vector<DialogueSession> load_corpus(const RunConfig& config, corpus::IngestReport* report = nullptr);

// ---------------------------------------------------------------------------

struct IpseResult {
    std::size_t completed = 0;
    std::size_t skipped = 0;
    std::vector<std::string> failed;
};

/// Evolves a profile for every session; sessions with a finished lineage are
/// skipped. Per-session failures are collected and the loop continues.
IpseResult cmd_ipse(RunContext& run, const std::vector<DialogueSession>& sessions);

/// Difficulty scores and the SFT/RL partition, written under datasets/.
corpus::CorpusPartition cmd_split(RunContext& run, const std::vector<DialogueSession>& sessions);

/// Role-reversal SFT records for the given sessions from their final profiles.
/// Returns the record count.
std::size_t cmd_sft_build(RunContext& run, const std::vector<DialogueSession>& sessions,
                          const std::filesystem::path& out_relative = "datasets/sft.jsonl");

struct RmBuildResult {
    std::size_t warmup = 0;
    std::size_t rlvr = 0;
};

RmBuildResult cmd_rm_build(RunContext& run, const std::filesystem::path& examples);

/// Scores examples against their gold judgments. Predictions come from the
/// file when given (one judgment JSON per line, aligned), otherwise from the
/// Reward role.
rubric::RmEvalReport cmd_rm_eval(RunContext& run, const std::filesystem::path& examples,
                                 const std::optional<std::filesystem::path>& predictions);

/// GRPO groups for the given profiles, exported to trajectories/grpo.jsonl.
nlohmann::json cmd_grpo_collect(RunContext& run, const std::vector<UserProfile>& profiles);

/// Final profiles of finished lineages for the listed sessions, in order.
std::vector<UserProfile> final_profiles(const RunContext& run, const std::vector<std::string>& session_ids);

struct EvalInputs {
    /// UtteranceEvalRecord JSONL.
    std::optional<std::filesystem::path> generated;
    /// {"profile": ..., "dialogue": ...} JSONL of finished rollouts.
    std::optional<std::filesystem::path> dialogues;
    /// UserProfile JSONL; each is rolled out against the assistant role first.
    std::optional<std::filesystem::path> profiles;
    /// AuthorPair JSONL.
    std::optional<std::filesystem::path> pairs;
    /// Labelled pairs used to calibrate the AVA threshold when none is configured.
    std::optional<std::filesystem::path> dev_pairs;
    std::string model = "Muse";
};

/// Computes every metric the inputs allow and writes reports/eval.{json,md}.
eval::EvalReport cmd_eval(RunContext& run, const EvalInputs& inputs);

/// Full chain: ingest, filter, ipse, split, sft, grpo (if enabled) and a
/// manifest of every produced file. Throws StageError.
nlohmann::json cmd_pipeline(RunContext& run);

/// Sorted {"files": [{"path", "sha256", "bytes"}]} over the run directory,
/// excluding the manifest itself.
nlohmann::json build_manifest(const std::filesystem::path& run_dir);

struct ChatOptions {
    bool score = false;
    std::string id;
};

/// REPL: the simulated user speaks, the human answers as the assistant.
/// "/quit" or end of input stops. The dialogue is saved on exit; returns its path.
std::filesystem::path cmd_chat(RunContext& run, const UserProfile& profile, std::istream& in, std::ostream& out,
                               const ChatOptions& options = {});

/// Reads a profile from JSON (profile or lineage summary) or plain text.
UserProfile load_profile(const std::filesystem::path& path);

/// Markdown for an eval report JSON or an RM eval JSON.
std::string cmd_report(const std::filesystem::path& report_json);

// ---------------------------------------------------------------------------
// File helpers

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines);
void write_text(const std::filesystem::path& path, std::string_view content);

}  // namespace muse::app
