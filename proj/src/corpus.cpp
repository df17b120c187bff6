#include "muse/corpus.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>

namespace muse::corpus {

using nlohmann::json;

std::size_t IngestReport::accepted() const {
    std::size_t n = 0;
    for (const auto& f : files) n += f.accepted;
    return n;
}

std::size_t IngestReport::skipped() const {
    std::size_t n = 0;
    for (const auto& f : files) n += f.skipped;
    return n;
}

std::vector<DialogueSession> ingest(std::span<const std::filesystem::path> paths, IngestReport* report) {
    std::vector<DialogueSession> sessions;
    for (const auto& path : paths) {
        std::ifstream in(path);
        if (!in) fail(ErrorKind::IoError, "cannot open corpus file " + path.string());
        FileReport file{path, 0, 0, 0, {}};
        std::string line;
        while (std::getline(in, line)) {
            ++file.lines;
            if (text::is_blank(line)) continue;
            try {
                sessions.push_back(session_from_json(json::parse(line)));
                ++file.accepted;
            } catch (const json::exception& e) {
                ++file.skipped;
                file.errors.push_back("line " + std::to_string(file.lines) + ": invalid JSON (" + e.what() + ")");
            } catch (const Error& e) {
                ++file.skipped;
                file.errors.push_back("line " + std::to_string(file.lines) + ": " + e.what());
            }
        }
        if (file.skipped > 0) {
            spdlog::warn("{}: {} malformed line(s) skipped, {} accepted", path.string(), file.skipped, file.accepted);
        }
        if (report) report->files.push_back(std::move(file));
    }
    return sessions;
}

void write_sessions(const std::filesystem::path& path, std::span<const DialogueSession> sessions) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    for (const auto& s : sessions) out << session_to_json(s).dump() << '\n';
    if (!out) fail(ErrorKind::IoError, "write failed for " + path.string());
}

std::vector<DialogueSession> filter_min_turns(std::span<const DialogueSession> sessions, std::size_t min_turns) {
    std::vector<DialogueSession> kept;
    std::copy_if(sessions.begin(), sessions.end(), std::back_inserter(kept),
                 [min_turns](const DialogueSession& s) { return s.turn_count() >= min_turns; });
    return kept;
}

// ---------------------------------------------------------------------------
// Difficulty

json difficulty_to_json(const DifficultyScore& s) {
    return json{{"session_id", s.session_id},
                {"constraint_density", s.constraint_density},
                {"information_withholding", s.information_withholding},
                {"intent_volatility", s.intent_volatility},
                {"total", s.total}};
}

DifficultyScore difficulty_from_json(const json& j) {
    return DifficultyScore{j.at("session_id").get<std::string>(), j.at("constraint_density").get<double>(),
                           j.at("information_withholding").get<double>(), j.at("intent_volatility").get<double>(),
                           j.at("total").get<double>()};
}

double parse_grid_score(std::string_view reply) {
    static const std::regex pattern(R"(SCORE\s*(?::|：)\s*([0-9]+(?:\.[0-9]+)?))", std::regex::icase);
    const std::string s(reply);
    std::smatch last;
    bool found = false;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), pattern); it != std::sregex_iterator(); ++it) {
        last = *it;
        found = true;
    }
    if (!found) fail(ErrorKind::ParseFailure, "no 'SCORE:' line in difficulty judgment");
    const double v = std::stod(last[1].str());
    for (double g : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        if (v == g) return g;
    }
    fail(ErrorKind::ParseFailure, "difficulty score " + last[1].str() + " is off the 0.25 grid");
}

double combine_difficulty(double constraint_density, double information_withholding, double intent_volatility,
                          const std::array<double, 3>& weights) {
    const double wsum = weights[0] + weights[1] + weights[2];
    if (!(wsum > 0.0) || weights[0] < 0 || weights[1] < 0 || weights[2] < 0) {
        fail(ErrorKind::ConfigError, "difficulty weights must be non-negative with a positive sum");
    }
    if (weights[0] == weights[1] && weights[1] == weights[2]) {
        return (constraint_density + information_withholding + intent_volatility) / 3.0;
    }
    return (weights[0] * constraint_density + weights[1] * information_withholding + weights[2] * intent_volatility) / wsum;
}

DifficultyScore score_difficulty(const DialogueSession& session, Gateway& gateway, const DifficultyOptions& options) {
    const auto dialogue = render_transcript(std::span(session.turns));
    auto ask = [&](const char* prompt_name, const char* tag) {
        std::vector<ChatMessage> messages{
            {MessageRole::User, fill_template(options.prompts.get(prompt_name), {{"DIALOGUE", dialogue}})}};
        auto reply = gateway.chat(ModelRole::Judge, messages, tag, 0.0);
        try {
            return parse_grid_score(reply.text);
        } catch (const Error&) {
            messages.push_back({MessageRole::Assistant, reply.text.empty() ? std::string("(empty)") : reply.text});
            messages.push_back({MessageRole::User, options.prompts.get("difficulty_reminder")});
            reply = gateway.chat(ModelRole::Judge, messages, std::string(tag) + ".retry", 0.0);
            return parse_grid_score(reply.text);
        }
    };
    DifficultyScore s;
    s.session_id = session.id;
    s.constraint_density = ask("difficulty_constraint_density", tags::kConstraintDensity);
    s.information_withholding = ask("difficulty_information_withholding", tags::kInformationWithholding);
    s.intent_volatility = ask("difficulty_intent_volatility", tags::kIntentVolatility);
    s.total = combine_difficulty(s.constraint_density, s.information_withholding, s.intent_volatility, options.weights);
    return s;
}

// ---------------------------------------------------------------------------
// Partition

std::size_t rl_count(std::size_t n, double rl_fraction) {
    const double x = rl_fraction * static_cast<double>(n);
    const double nearest = std::round(x);
    const double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
    return std::min(n, static_cast<std::size_t>(k));
}

namespace {

void check_fraction(double rl_fraction) {
    if (!(rl_fraction > 0.0 && rl_fraction < 1.0)) {
        fail(ErrorKind::InvalidFraction, "rl_fraction must lie in (0, 1), got " + std::to_string(rl_fraction));
    }
}

void split_into(std::vector<const DifficultyScore*> ranked, double rl_fraction, CorpusPartition& out) {
    std::sort(ranked.begin(), ranked.end(), [](const DifficultyScore* a, const DifficultyScore* b) {
        if (a->total != b->total) return a->total > b->total;
        return a->session_id < b->session_id;
    });
    const auto k = rl_count(ranked.size(), rl_fraction);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        (i < k ? out.rl_ids : out.sft_ids).insert(ranked[i]->session_id);
    }
}

}  // namespace

CorpusPartition partition(std::span<const DifficultyScore> scores, double rl_fraction) {
    check_fraction(rl_fraction);
    std::vector<const DifficultyScore*> ranked;
    std::set<std::string> seen;
    for (const auto& s : scores) {
        if (!seen.insert(s.session_id).second) fail(ErrorKind::ContractViolation, "duplicate score for '" + s.session_id + "'");
        ranked.push_back(&s);
    }
    CorpusPartition out;
    split_into(std::move(ranked), rl_fraction, out);
    return out;
}

CorpusPartition partition_per_domain(std::span<const DifficultyScore> scores, const std::map<std::string, Domain>& domains,
                                     double rl_fraction) {
    check_fraction(rl_fraction);
    std::map<Domain, std::vector<const DifficultyScore*>> by_domain;
    for (const auto& s : scores) {
        auto it = domains.find(s.session_id);
        if (it == domains.end()) fail(ErrorKind::ContractViolation, "no domain known for '" + s.session_id + "'");
        by_domain[it->second].push_back(&s);
    }
    CorpusPartition out;
    for (auto& [domain, group] : by_domain) split_into(std::move(group), rl_fraction, out);
    return out;
}

json partition_to_json(const CorpusPartition& p, double rl_fraction) {
    return json{{"rl_fraction", rl_fraction},
                {"sft_count", p.sft_ids.size()},
                {"rl_count", p.rl_ids.size()},
                {"sft_ids", p.sft_ids},
                {"rl_ids", p.rl_ids}};
}

// ---------------------------------------------------------------------------
// SFT records

std::vector<MaskedSpan> masked_spans(const SftRecord& record) {
    std::vector<MaskedSpan> spans;
    spans.reserve(record.context_messages.size() + 1);
    for (const auto& m : record.context_messages) spans.push_back({m.content, Segment::Context});
    spans.push_back({record.target_text, Segment::Target});
    return spans;
}

json sft_record_to_json(const SftRecord& r) {
    return json{{"profile_text", r.profile_text},
                {"messages", messages_to_json(r.context_messages)},
                {"target", r.target_text},
                {"session_id", r.session_id},
                {"turn_index", r.turn_index}};
}

SftRecord sft_record_from_json(const json& j) {
    SftRecord r;
    r.profile_text = j.at("profile_text").get<std::string>();
    for (const auto& m : j.at("messages")) r.context_messages.push_back(message_from_json(m));
    r.target_text = j.at("target").get<std::string>();
    r.session_id = j.at("session_id").get<std::string>();
    r.turn_index = j.at("turn_index").get<std::size_t>();
    return r;
}

json sft_file_header() {
    return json{{"format", "muse.sft.v1"},
                {"loss_mask", "loss on 'target' tokens only; 'profile_text' and 'messages' are masked context"},
                {"messages_perspective",
                 "role-reversed: system=profile, assistant=past user turns, user=past assistant turns; "
                 "'target' is the next user turn, generated in the assistant slot"}};
}

std::vector<SftRecord> build_sft_records(const UserProfile& profile, const DialogueSession& session) {
    if (profile.session_id != session.id) {
        fail(ErrorKind::ProfileSessionMismatch,
             "profile '" + profile.id + "' belongs to session '" + profile.session_id + "', not '" + session.id + "'");
    }
    std::vector<SftRecord> records;
    records.reserve(session.turn_count());
    for (std::size_t j = 0; j < session.turn_count(); ++j) {
        const auto ctx = context_at(session, profile, j);
        records.push_back(SftRecord{profile.text, render_messages(ctx, Perspective::AsUser), session.turns[j].user.text,
                                    session.id, j});
    }
    return records;
}

double masked_nll(std::span<const SftRecord> records, const SequenceScorer& score) {
    double nll = 0.0;
    for (const auto& record : records) {
        for (const auto& token : score(record)) {
            if (token.segment == Segment::Target) nll -= token.logprob;
        }
    }
    return nll;
}

SequenceScorer gateway_scorer(Gateway& gateway, ModelRole role) {
    return [&gateway, role](const SftRecord& record) {
        const auto scored = gateway.score(role, ScoreRequest{record.context_messages, record.target_text, "sft.nll"});
        std::vector<ScoredToken> out;
        out.reserve(scored.tokens.size());
        for (const auto& t : scored.tokens) out.push_back({t.token, t.logprob, Segment::Target});
        return out;
    };
}

}  // namespace muse::corpus
