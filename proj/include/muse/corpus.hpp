#pragma once

// Corpus ingestion, the minimum-turn filter, difficulty scoring and the
// SFT/RL partition, and role-reversal SFT records with loss masks.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"
#include "muse/prompts.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace muse::corpus {

struct FileReport {
    std::filesystem::path path;
    std::size_t lines = 0;
    std::size_t accepted = 0;
    std::size_t skipped = 0;
    /// "line N: reason" for every skipped line.
    std::vector<std::string> errors;
};

struct IngestReport {
    std::vector<FileReport> files;

    [[nodiscard]] std::size_t accepted() const;
    [[nodiscard]] std::size_t skipped() const;
};

/// Reads session JSONL files. Malformed lines are skipped and reported.
/// Throws IoError for unreadable files.
std::vector<DialogueSession> ingest(std::span<const std::filesystem::path> paths, IngestReport* report = nullptr);

void write_sessions(const std::filesystem::path& path, std::span<const DialogueSession> sessions);

/// Keeps sessions with at least `min_turns` turns, in order.
std::vector<DialogueSession> filter_min_turns(std::span<const DialogueSession> sessions, std::size_t min_turns = 4);

// ---------------------------------------------------------------------------
// Difficulty

struct DifficultyScore {
    std::string session_id;
    double constraint_density = 0.0;
    double information_withholding = 0.0;
    double intent_volatility = 0.0;
    double total = 0.0;
};

nlohmann::json difficulty_to_json(const DifficultyScore& s);
DifficultyScore difficulty_from_json(const nlohmann::json& j);

struct DifficultyOptions {
    /// Weights of (constraint density, information withholding, intent volatility).
    std::array<double, 3> weights{1.0, 1.0, 1.0};
    PromptLibrary prompts = PromptLibrary::defaults();
};

namespace tags {
inline constexpr const char* kConstraintDensity = "corpus.difficulty.constraint_density";
inline constexpr const char* kInformationWithholding = "corpus.difficulty.information_withholding";
inline constexpr const char* kIntentVolatility = "corpus.difficulty.intent_volatility";
}  // namespace tags

/// Parses "SCORE: x" with x on the grid {0, 0.25, 0.5, 0.75, 1}. Throws ParseFailure.
double parse_grid_score(std::string_view reply);

/// Weighted mean of the three sub-scores (equal weights give the plain mean).
double combine_difficulty(double constraint_density, double information_withholding, double intent_volatility,
                          const std::array<double, 3>& weights = {1.0, 1.0, 1.0});

/// Three temperature-0 judge calls, one per signal, each retried once on an
/// off-grid answer.
DifficultyScore score_difficulty(const DialogueSession& session, Gateway& gateway, const DifficultyOptions& options = {});

// ---------------------------------------------------------------------------
// Partition

struct CorpusPartition {
    std::set<std::string> sft_ids;
    std::set<std::string> rl_ids;
};

nlohmann::json partition_to_json(const CorpusPartition& p, double rl_fraction);

/// Number of sessions routed to RL: ceil(fraction * n), computed so that
/// products that are integral in exact arithmetic are not rounded up.
std::size_t rl_count(std::size_t n, double rl_fraction);

/// Ranks by (total desc, session_id asc) and sends the first rl_count() to RL.
/// Throws InvalidFraction outside (0, 1).
CorpusPartition partition(std::span<const DifficultyScore> scores, double rl_fraction = 0.10);

/// The same split applied within each domain separately.
CorpusPartition partition_per_domain(std::span<const DifficultyScore> scores,
                                     const std::map<std::string, Domain>& domains, double rl_fraction = 0.10);

// ---------------------------------------------------------------------------
// Role-reversal SFT records

/// One training example: predict the user utterance `target_text` given the
/// profile and the preceding context. Loss applies to `target_text` only.
struct SftRecord {
    std::string profile_text;
    /// AsUser rendering of the context; the first message is System(profile).
    std::vector<ChatMessage> context_messages;
    std::string target_text;
    std::string session_id;
    std::size_t turn_index = 0;
};

enum class Segment { Context, Target };

struct MaskedSpan {
    std::string text;
    Segment segment = Segment::Context;
};

/// The record as an ordered sequence of spans; only the final span is trainable.
std::vector<MaskedSpan> masked_spans(const SftRecord& record);

nlohmann::json sft_record_to_json(const SftRecord& record);
SftRecord sft_record_from_json(const nlohmann::json& j);

/// First line of every SFT JSONL file, documenting the loss-mask convention.
nlohmann::json sft_file_header();

/// One record per user turn. Throws ProfileSessionMismatch.
std::vector<SftRecord> build_sft_records(const UserProfile& profile, const DialogueSession& session);

struct ScoredToken {
    std::string token;
    double logprob = 0.0;
    Segment segment = Segment::Context;
};

/// Scores a record's token sequence. Implementations may return context
/// tokens too; only Target tokens contribute to the loss.
using SequenceScorer = std::function<std::vector<ScoredToken>(const SftRecord&)>;

/// -sum of target-token logprobs over all records.
double masked_nll(std::span<const SftRecord> records, const SequenceScorer& score);

/// Scores targets through the gateway's score_continuation (target tokens only).
SequenceScorer gateway_scorer(Gateway& gateway, ModelRole role = ModelRole::Simulator);

}  // namespace muse::corpus
