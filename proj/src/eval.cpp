#include "muse/eval.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <regex>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace muse::eval {

using nlohmann::json;

json record_to_json(const UtteranceEvalRecord& r) {
    return json{{"id", r.id},
                {"generated", r.generated},
                {"reference", r.reference},
                {"profile_text", r.context.profile.text},
                {"context", utterances_to_json(r.context.history)}};
}

UtteranceEvalRecord record_from_json(const json& j) {
    UtteranceEvalRecord r;
    r.id = j.value("id", std::string());
    r.generated = j.at("generated").get<std::string>();
    r.reference = j.value("reference", std::string());
    r.context.profile.text = j.value("profile_text", std::string());
    r.context.history = utterances_from_json(j.value("context", json::array()));
    if (text::is_blank(r.generated)) fail(ErrorKind::FormatError, "record '" + r.id + "' has an empty generated text");
    return r;
}

// ---------------------------------------------------------------------------
// Plugins

struct PluginProcess::Impl {
    pid_t pid = -1;
    int to_child = -1;
    FILE* from_child = nullptr;
    std::string command;
    std::mutex mutex;
};

PluginProcess::PluginProcess(const std::string& command) : impl_(std::make_unique<Impl>()) {
    static std::once_flag ignore_sigpipe;
    std::call_once(ignore_sigpipe, [] { std::signal(SIGPIPE, SIG_IGN); });

    int in_pipe[2];
    int out_pipe[2];
    if (pipe(in_pipe) != 0) fail(ErrorKind::BackendUnavailable, "pipe() failed for plugin");
    if (pipe(out_pipe) != 0) {
        close(in_pipe[0]);
        close(in_pipe[1]);
        fail(ErrorKind::BackendUnavailable, "pipe() failed for plugin");
    }
    const pid_t pid = fork();
    if (pid < 0) fail(ErrorKind::BackendUnavailable, "fork() failed for plugin");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    impl_->pid = pid;
    impl_->to_child = in_pipe[1];
    impl_->from_child = fdopen(out_pipe[0], "r");
    impl_->command = command;
}

PluginProcess::~PluginProcess() {
    if (!impl_) return;
    if (impl_->to_child >= 0) close(impl_->to_child);
    if (impl_->from_child) fclose(impl_->from_child);
    if (impl_->pid > 0) {
        int status = 0;
        waitpid(impl_->pid, &status, 0);
    }
}

json PluginProcess::call(const json& request) {
    std::lock_guard lock(impl_->mutex);
    const auto line = request.dump() + "\n";
    std::size_t written = 0;
    while (written < line.size()) {
        const auto n = write(impl_->to_child, line.data() + written, line.size() - written);
        if (n <= 0) fail(ErrorKind::BackendUnavailable, "plugin '" + impl_->command + "' closed its input");
        written += static_cast<std::size_t>(n);
    }
    std::string reply;
    for (int c = std::fgetc(impl_->from_child); c != EOF && c != '\n'; c = std::fgetc(impl_->from_child)) {
        reply.push_back(static_cast<char>(c));
    }
    if (reply.empty()) fail(ErrorKind::BackendUnavailable, "plugin '" + impl_->command + "' returned no reply");
    try {
        return json::parse(reply);
    } catch (const json::exception&) {
        fail(ErrorKind::ContractViolation, "plugin '" + impl_->command + "' replied with invalid JSON");
    }
}

Detector subprocess_detector(const std::string& command) {
    auto proc = std::make_shared<PluginProcess>(command);
    return [proc](std::string_view text) {
        const auto reply = proc->call(json{{"text", text}});
        if (!reply.contains("prob") || !reply["prob"].is_number()) {
            fail(ErrorKind::ContractViolation, "detector reply lacks a numeric 'prob'");
        }
        return reply["prob"].get<double>();
    };
}

Embedder subprocess_embedder(const std::string& command) {
    auto proc = std::make_shared<PluginProcess>(command);
    return [proc](std::string_view text) {
        const auto reply = proc->call(json{{"text", text}});
        if (!reply.contains("vec") || !reply["vec"].is_array()) {
            fail(ErrorKind::ContractViolation, "embedder reply lacks a 'vec' array");
        }
        return reply["vec"].get<std::vector<double>>();
    };
}

// ---------------------------------------------------------------------------
// Objective metrics

double ai_probability(std::span<const UtteranceEvalRecord> records, const Detector& detector) {
    if (records.empty()) fail(ErrorKind::EmptySet, "no records for AI probability");
    double sum = 0.0;
    for (const auto& r : records) {
        const double p = detector(r.generated);
        if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::OutOfRange, "detector probability outside [0, 1]");
        sum += p;
    }
    return 100.0 * sum / static_cast<double>(records.size());
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorKind::LengthMismatch, "embedding dimensions differ");
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::ZeroVector, "embedding has zero norm");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double style_similarity(std::span<const UtteranceEvalRecord> records, const Embedder& embedder) {
    if (records.empty()) fail(ErrorKind::EmptySet, "no records for style similarity");
    double sum = 0.0;
    for (const auto& r : records) sum += cosine(embedder(r.generated), embedder(r.reference));
    return sum / static_cast<double>(records.size());
}

json pair_to_json(const AuthorPair& p) { return json{{"a", p.a}, {"b", p.b}, {"same_author", p.same_author}}; }

AuthorPair pair_from_json(const json& j) {
    return AuthorPair{j.at("a").get<std::string>(), j.at("b").get<std::string>(), j.at("same_author").get<bool>()};
}

namespace {

std::vector<double> pair_cosines(std::span<const AuthorPair> pairs, const Embedder& embedder) {
    std::vector<double> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(cosine(embedder(p.a), embedder(p.b)));
    return out;
}

std::size_t correct_at(std::span<const AuthorPair> pairs, std::span<const double> cosines, double threshold) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if ((cosines[i] >= threshold) == pairs[i].same_author) ++correct;
    }
    return correct;
}

}  // namespace

double author_verification_accuracy(std::span<const AuthorPair> pairs, const Embedder& embedder, double threshold) {
    if (pairs.empty()) fail(ErrorKind::EmptySet, "no pairs for author verification");
    const auto cosines = pair_cosines(pairs, embedder);
    return 100.0 * static_cast<double>(correct_at(pairs, cosines, threshold)) / static_cast<double>(pairs.size());
}

double calibrate_threshold(std::span<const AuthorPair> pairs, const Embedder& embedder) {
    if (pairs.empty()) fail(ErrorKind::EmptySet, "no pairs to calibrate on");
    const auto cosines = pair_cosines(pairs, embedder);
    std::vector<double> candidates = cosines;
    candidates.push_back(std::nextafter(*std::max_element(cosines.begin(), cosines.end()), 2.0));
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    double best = candidates.front();
    std::size_t best_correct = 0;
    for (double t : candidates) {
        const auto c = correct_at(pairs, cosines, t);
        if (c > best_correct) {
            best_correct = c;
            best = t;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Judge

namespace {

const std::string kNumber = R"((-?[0-9]*\.?[0-9]+))";

double grid_value(const std::string& token) {
    const double v = std::stod(token);
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::ParseFailure, "judge score " + token + " is outside [0, 1]");
    const double steps = v * 20.0;
    if (std::abs(steps - std::round(steps)) > 1e-6) {
        fail(ErrorKind::ParseFailure, "judge score " + token + " is not a multiple of 0.05");
    }
    return v;
}

std::array<double, 4> parse_four(std::string_view reply, const std::array<const char*, 4>& labels) {
    const std::string s(reply);
    std::array<double, 4> out{};
    bool all_labels = true;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::regex re(std::string(R"(\b)") + labels[i] + R"(\s*(?:[:=]|：)\s*)" + kNumber);
        std::smatch last;
        bool found = false;
        for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
            last = *it;
            found = true;
        }
        if (!found) {
            all_labels = false;
            break;
        }
        out[i] = grid_value(last[1].str());
    }
    if (all_labels) return out;

    static const std::regex tuple(R"(\(\s*)" + kNumber + R"(\s*,\s*)" + kNumber + R"(\s*,\s*)" + kNumber +
                                  R"(\s*,\s*)" + kNumber + R"(\s*\))");
    std::smatch last;
    bool found = false;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), tuple); it != std::sregex_iterator(); ++it) {
        last = *it;
        found = true;
    }
    if (!found) fail(ErrorKind::ParseFailure, "judge reply lacks four labelled scores");
    for (std::size_t i = 0; i < 4; ++i) out[i] = grid_value(last[i + 1].str());
    return out;
}

template <typename Parse>
auto ask_judge(Gateway& gateway, std::string prompt, const char* tag, const PromptLibrary& prompts, Parse parse) {
    std::vector<ChatMessage> messages{{MessageRole::User, std::move(prompt)}};
    auto reply = gateway.chat(ModelRole::Judge, messages, tag, 0.0);
    try {
        return parse(reply.text);
    } catch (const Error& e) {
        spdlog::debug("judge reply unparsable ({}), re-prompting", e.what());
        messages.push_back({MessageRole::Assistant, reply.text.empty() ? std::string("(empty)") : reply.text});
        messages.push_back({MessageRole::User, prompts.get("judge_reminder")});
        reply = gateway.chat(ModelRole::Judge, messages, std::string(tag) + ".retry", 0.0);
        return parse(reply.text);
    }
}

}  // namespace

UtteranceJudgment parse_utterance_judgment(std::string_view text) {
    const auto v = parse_four(text, {"CR", "RF", "GC", "LN"});
    return UtteranceJudgment{v[0], v[1], v[2], v[3]};
}

SessionJudgment parse_session_judgment(std::string_view text) {
    const auto v = parse_four(text, {"PC", "GE", "DC", "CC"});
    return SessionJudgment{v[0], v[1], v[2], v[3], (v[0] + v[1] + v[2] + v[3]) / 4.0};
}

UtteranceJudgment judge_utterance(Gateway& gateway, const UtteranceEvalRecord& record, const PromptLibrary& prompts) {
    if (text::is_blank(record.generated)) fail(ErrorKind::InvalidCandidate, "generated text is empty");
    const auto& history = record.context.history;
    const auto prompt = fill_template(prompts.get("judge_utterance"),
                                      {{"PROFILE", record.context.profile.text},
                                       {"CONTEXT", history.empty() ? std::string("(none)") : render_transcript(history)},
                                       {"GENERATED", record.generated},
                                       {"REFERENCE", record.reference.empty() ? std::string("(none)") : record.reference}});
    return ask_judge(gateway, prompt, tags::kUtterance, prompts, parse_utterance_judgment);
}

SessionJudgment judge_session(Gateway& gateway, const SimulatedDialogue& dialogue, const UserProfile& profile,
                              const PromptLibrary& prompts) {
    if (dialogue.turns.empty()) fail(ErrorKind::ContractViolation, "dialogue '" + dialogue.id + "' has no turns");
    const auto prompt = fill_template(prompts.get("judge_session"),
                                      {{"PROFILE", profile.text}, {"DIALOGUE", render_transcript(std::span(dialogue.turns))}});
    return ask_judge(gateway, prompt, tags::kSession, prompts, parse_session_judgment);
}

// ---------------------------------------------------------------------------
// Report

EvalReport build_report(EvalReport r) {
    if (r.persona_consistency && r.goal_effectiveness && r.dialogue_coherence && r.constraint_compliance) {
        r.session_avg =
            (*r.persona_consistency + *r.goal_effectiveness + *r.dialogue_coherence + *r.constraint_compliance) / 4.0;
    } else {
        r.session_avg.reset();
    }
    return r;
}

void add_utterance_judgments(EvalReport& r, std::span<const UtteranceJudgment> js) {
    if (js.empty()) fail(ErrorKind::EmptySet, "no utterance judgments");
    const double n = static_cast<double>(js.size());
    double cr = 0, rf = 0, gc = 0, ln = 0;
    for (const auto& j : js) {
        cr += j.contextual_relevance;
        rf += j.response_fidelity;
        gc += j.goal_contribution;
        ln += j.linguistic_naturalness;
    }
    r.contextual_relevance = cr / n;
    r.response_fidelity = rf / n;
    r.goal_contribution = gc / n;
    r.linguistic_naturalness = ln / n;
}

void add_session_judgments(EvalReport& r, std::span<const SessionJudgment> js) {
    if (js.empty()) fail(ErrorKind::EmptySet, "no session judgments");
    const double n = static_cast<double>(js.size());
    double pc = 0, ge = 0, dc = 0, cc = 0;
    for (const auto& j : js) {
        pc += j.persona_consistency;
        ge += j.goal_effectiveness;
        dc += j.dialogue_coherence;
        cc += j.constraint_compliance;
    }
    r.persona_consistency = pc / n;
    r.goal_effectiveness = ge / n;
    r.dialogue_coherence = dc / n;
    r.constraint_compliance = cc / n;
}

namespace {

struct Column {
    const char* key;
    const char* header;
    int decimals;
    std::optional<double> EvalReport::*field;
};

const std::array<Column, 7> kPanelA{{
    {"ai_prob_pct", "AI Prob. ↓", 2, &EvalReport::ai_prob_pct},
    {"style_sim", "Style Sim. ↑", 4, &EvalReport::style_sim},
    {"ava", "AVA ↑", 2, &EvalReport::ava},
    {"contextual_relevance", "Contxt. Relv. ↑", 4, &EvalReport::contextual_relevance},
    {"response_fidelity", "Resp. Fid. ↑", 4, &EvalReport::response_fidelity},
    {"goal_contribution", "Goal Contr. ↑", 4, &EvalReport::goal_contribution},
    {"linguistic_naturalness", "Ling. Nat. ↑", 4, &EvalReport::linguistic_naturalness},
}};

const std::array<Column, 5> kPanelB{{
    {"persona_consistency", "Pers. Cons. ↑", 4, &EvalReport::persona_consistency},
    {"goal_effectiveness", "Goal. Eff. ↑", 4, &EvalReport::goal_effectiveness},
    {"dialogue_coherence", "Dial. Coh. ↑", 4, &EvalReport::dialogue_coherence},
    {"constraint_compliance", "Constr. Comp. ↑", 4, &EvalReport::constraint_compliance},
    {"avg", "Avg. Score ↑", 4, &EvalReport::session_avg},
}};

constexpr const char* kAbsent = "—";

template <std::size_t N>
void render_panel(std::string& out, const char* title, const EvalReport& r, const std::array<Column, N>& cols) {
    out += "### ";
    out += title;
    out += "\n\n| Model |";
    for (const auto& c : cols) out += std::string(" ") + c.header + " |";
    out += "\n| --- |";
    for (std::size_t i = 0; i < N; ++i) out += " ---: |";
    out += "\n| " + r.model + " |";
    for (const auto& c : cols) {
        const auto& v = r.*(c.field);
        out += " " + (v ? text::fixed(*v, c.decimals) : std::string(kAbsent)) + " |";
    }
    out += "\n";
}

std::vector<std::string> cells(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 1; i < line.size(); ++i) {
        if (line[i] == '|') {
            out.push_back(text::trim(cur));
            cur.clear();
        } else {
            cur.push_back(line[i]);
        }
    }
    return out;
}

}  // namespace

json report_to_json(const EvalReport& r) {
    auto put = [](json& obj, const Column& c, const EvalReport& rep) {
        const auto& v = rep.*(c.field);
        obj[c.key] = v ? json(*v) : json(nullptr);
    };
    json utterance = json::object();
    for (const auto& c : kPanelA) put(utterance, c, r);
    json session = json::object();
    for (const auto& c : kPanelB) put(session, c, r);
    return json{{"model", r.model}, {"utterance", std::move(utterance)}, {"session", std::move(session)}};
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.model = j.value("model", std::string("Muse"));
    auto get = [&r](const json& obj, const Column& c) {
        if (obj.contains(c.key) && obj[c.key].is_number()) r.*(c.field) = obj[c.key].get<double>();
    };
    const auto utterance = j.value("utterance", json::object());
    for (const auto& c : kPanelA) get(utterance, c);
    const auto session = j.value("session", json::object());
    for (const auto& c : kPanelB) get(session, c);
    return r;
}

std::string render_markdown(const EvalReport& r) {
    std::string out;
    render_panel(out, "Panel A: Utterance-Level Evaluation", r, kPanelA);
    out += "\n";
    render_panel(out, "Panel B: Session-Level Evaluation", r, kPanelB);
    return out;
}

EvalReport parse_markdown(std::string_view markdown) {
    std::vector<std::vector<std::string>> rows;
    std::size_t start = 0;
    while (start < markdown.size()) {
        auto end = markdown.find('\n', start);
        if (end == std::string_view::npos) end = markdown.size();
        const auto line = text::trim(markdown.substr(start, end - start));
        start = end + 1;
        if (!line.starts_with("|")) continue;
        auto row = cells(line);
        if (row.empty() || row[0] == "Model" || row[0].starts_with("---")) continue;
        rows.push_back(std::move(row));
    }
    if (rows.size() != 2 || rows[0].size() != kPanelA.size() + 1 || rows[1].size() != kPanelB.size() + 1) {
        fail(ErrorKind::FormatError, "expected one data row in each of the two report panels");
    }
    EvalReport r;
    r.model = rows[0][0];
    auto read = [&r](const std::string& cell, const Column& c) {
        if (cell == kAbsent) return;
        try {
            r.*(c.field) = std::stod(cell);
        } catch (const std::exception&) {
            fail(ErrorKind::FormatError, "unreadable report value '" + cell + "'");
        }
    };
    for (std::size_t i = 0; i < kPanelA.size(); ++i) read(rows[0][i + 1], kPanelA[i]);
    for (std::size_t i = 0; i < kPanelB.size(); ++i) read(rows[1][i + 1], kPanelB[i]);
    return r;
}

}  // namespace muse::eval
