#pragma once

// Evaluation: objective utterance metrics through pluggable detector and
// embedder scorers, LLM-judge utterance and session scores, and the
// two-panel report.

#include "muse/dialogue.hpp"
#include "muse/gateway.hpp"
#include "muse/prompts.hpp"
#include "muse/rollout.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace muse::eval {

struct UtteranceEvalRecord {
    std::string id;
    std::string generated;
    std::string reference;
    DialogueContext context;
};

nlohmann::json record_to_json(const UtteranceEvalRecord& r);
/// {"id","generated","reference","profile_text","context":[{"role","content"}]}
UtteranceEvalRecord record_from_json(const nlohmann::json& j);

/// Probability in [0, 1] that a text is machine-written.
using Detector = std::function<double(std::string_view text)>;
/// A style embedding.
using Embedder = std::function<std::vector<double>(std::string_view text)>;

/// A long-lived child process speaking line-delimited JSON on stdin/stdout.
class PluginProcess {
public:
    /// Runs `command` through /bin/sh. Throws BackendUnavailable if it cannot start.
    explicit PluginProcess(const std::string& command);
    ~PluginProcess();
    PluginProcess(const PluginProcess&) = delete;
    PluginProcess& operator=(const PluginProcess&) = delete;

    /// Sends one request line and reads one reply line. Serialized internally.
    nlohmann::json call(const nlohmann::json& request);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// {"text"} -> {"prob"}
Detector subprocess_detector(const std::string& command);
/// {"text"} -> {"vec": [...]}
Embedder subprocess_embedder(const std::string& command);

/// 100 * mean detector probability over generated texts. Throws EmptySet.
double ai_probability(std::span<const UtteranceEvalRecord> records, const Detector& detector);

/// Throws ZeroVector for a zero-norm input, LengthMismatch for unequal dimensions.
double cosine(std::span<const double> a, std::span<const double> b);

/// Mean cosine between generated and reference embeddings. Throws EmptySet.
double style_similarity(std::span<const UtteranceEvalRecord> records, const Embedder& embedder);

struct AuthorPair {
    std::string a;
    std::string b;
    bool same_author = false;
};

nlohmann::json pair_to_json(const AuthorPair& p);
AuthorPair pair_from_json(const nlohmann::json& j);

/// 100 * accuracy of "same author iff cosine >= threshold". Throws EmptySet.
double author_verification_accuracy(std::span<const AuthorPair> pairs, const Embedder& embedder, double threshold);

/// The threshold maximizing accuracy on labelled pairs; candidates are the
/// observed cosines (plus one above all of them), ties go to the lowest.
double calibrate_threshold(std::span<const AuthorPair> pairs, const Embedder& embedder);

// ---------------------------------------------------------------------------
// LLM judge

namespace tags {
inline constexpr const char* kUtterance = "eval.judge.utterance";
inline constexpr const char* kSession = "eval.judge.session";
inline constexpr const char* kUser = "eval.rollout.user";
inline constexpr const char* kAssistant = "eval.rollout.assistant";
}  // namespace tags

struct UtteranceJudgment {
    double contextual_relevance = 0.0;
    double response_fidelity = 0.0;
    double goal_contribution = 0.0;
    double linguistic_naturalness = 0.0;
};

struct SessionJudgment {
    double persona_consistency = 0.0;
    double goal_effectiveness = 0.0;
    double dialogue_coherence = 0.0;
    double constraint_compliance = 0.0;
    double avg = 0.0;
};

/// "CR:a RF:b GC:c LN:d", or a bare "(a, b, c, d)". Each score must lie in
/// [0, 1] on the 0.05 grid. Throws ParseFailure.
UtteranceJudgment parse_utterance_judgment(std::string_view text);
/// "PC:a GE:b DC:c CC:d" or "(a, b, c, d)"; avg is computed. Throws ParseFailure.
SessionJudgment parse_session_judgment(std::string_view text);

/// One temperature-0 Judge call, re-prompted once on a parse failure.
UtteranceJudgment judge_utterance(Gateway& gateway, const UtteranceEvalRecord& record,
                                  const PromptLibrary& prompts = PromptLibrary::defaults());
SessionJudgment judge_session(Gateway& gateway, const SimulatedDialogue& dialogue, const UserProfile& profile,
                              const PromptLibrary& prompts = PromptLibrary::defaults());

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
    std::string model = "Muse";
    std::optional<double> ai_prob_pct;
    std::optional<double> style_sim;
    std::optional<double> ava;
    std::optional<double> contextual_relevance;
    std::optional<double> response_fidelity;
    std::optional<double> goal_contribution;
    std::optional<double> linguistic_naturalness;
    std::optional<double> persona_consistency;
    std::optional<double> goal_effectiveness;
    std::optional<double> dialogue_coherence;
    std::optional<double> constraint_compliance;
    std::optional<double> session_avg;
};

/// Fills session_avg with the mean of the four session dimensions when all
/// are present (absent otherwise).
EvalReport build_report(EvalReport metrics);

/// Mean of each judge dimension over the records.
void add_utterance_judgments(EvalReport& report, std::span<const UtteranceJudgment> judgments);
void add_session_judgments(EvalReport& report, std::span<const SessionJudgment> judgments);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

/// Two markdown tables. AI Prob and AVA use 2 decimals, the rest 4; absent
/// values render as an em dash.
std::string render_markdown(const EvalReport& r);
/// Reads back the values printed by render_markdown. Throws FormatError.
EvalReport parse_markdown(std::string_view markdown);

}  // namespace muse::eval
