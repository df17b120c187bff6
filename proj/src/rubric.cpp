#include "muse/rubric.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <regex>

namespace muse::rubric {

using nlohmann::json;

bool on_grid(double v) noexcept { return v == 0.0 || v == 0.5 || v == 1.0; }

RubricJudgment make_judgment(double hl, double pc, double cc, std::string rationale) {
    for (double v : {hl, pc, cc}) {
        if (!on_grid(v)) fail(ErrorKind::OutOfRange, "rubric score " + std::to_string(v) + " is not in {0, 0.5, 1}");
    }
    return RubricJudgment{hl, pc, cc, std::move(rationale), (hl + pc + cc) / 3.0};
}

json judgment_to_json(const RubricJudgment& j) {
    return json{{"hl", j.human_likeness}, {"pc", j.persona_consistency}, {"cc", j.context_coherence},
                {"rationale", j.rationale}, {"overall", j.overall}};
}

RubricJudgment judgment_from_json(const json& j) {
    return make_judgment(j.at("hl").get<double>(), j.at("pc").get<double>(), j.at("cc").get<double>(),
                         j.value("rationale", std::string()));
}

namespace {

std::string grid_text(double v) { return v == 0.0 ? "0" : v == 1.0 ? "1" : "0.5"; }

}  // namespace

std::string format_judgment(const RubricJudgment& j) {
    return "RATIONALE: " + j.rationale + "\nHL:" + grid_text(j.human_likeness) + " PC:" +
           grid_text(j.persona_consistency) + " CC:" + grid_text(j.context_coherence);
}

RubricJudgment parse_judgment(std::string_view reply) {
    static const std::regex line(
        R"(HL\s*(?::|：)\s*([0-9]*\.?[0-9]+)[\s,;|]+PC\s*(?::|：)\s*([0-9]*\.?[0-9]+)[\s,;|]+CC\s*(?::|：)\s*([0-9]*\.?[0-9]+))");
    const std::string s(reply);
    std::smatch last;
    bool found = false;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), line); it != std::sregex_iterator(); ++it) {
        last = *it;
        found = true;
    }
    if (!found) fail(ErrorKind::ParseFailure, "judgment lacks an 'HL:x PC:y CC:z' line");

    double scores[3];
    for (int i = 0; i < 3; ++i) {
        scores[i] = std::stod(last[i + 1].str());
        if (!on_grid(scores[i])) fail(ErrorKind::ParseFailure, "rubric score " + last[i + 1].str() + " is off the grid");
    }

    std::string rationale = s.substr(0, static_cast<std::size_t>(last.position(0)));
    if (const auto at = rationale.rfind("RATIONALE"); at != std::string::npos) {
        rationale.erase(0, at + 9);
        rationale = text::trim(rationale);
        if (rationale.starts_with(":")) rationale.erase(0, 1);
        else if (rationale.starts_with("\xEF\xBC\x9A")) rationale.erase(0, 3);
    }
    return make_judgment(scores[0], scores[1], scores[2], text::trim(rationale));
}

std::vector<ChatMessage> build_judge_prompt(std::string_view profile_text, std::span<const Utterance> context,
                                            std::string_view utterance, const PromptLibrary& prompts) {
    if (text::is_blank(utterance)) fail(ErrorKind::InvalidCandidate, "candidate utterance is empty");
    const auto history = context.empty() ? std::string("(none)") : render_transcript(context);
    return {ChatMessage{MessageRole::System, prompts.get("rubric_judge")},
            ChatMessage{MessageRole::User, fill_template(prompts.get("rubric_judge_input"),
                                                         {{"PROFILE", std::string(profile_text)},
                                                          {"CONTEXT", history},
                                                          {"CANDIDATE", text::trim(utterance)}})}};
}

RubricJudgment judge(Gateway& gateway, std::string_view profile_text, std::span<const Utterance> context,
                     std::string_view utterance, std::string tag, ModelRole role, const PromptLibrary& prompts) {
    auto messages = build_judge_prompt(profile_text, context, utterance, prompts);
    auto reply = gateway.chat(role, messages, tag);
    try {
        return parse_judgment(reply.text);
    } catch (const Error& e) {
        spdlog::debug("rubric judgment unparsable ({}), re-prompting", e.what());
        messages.push_back({MessageRole::Assistant, reply.text.empty() ? std::string("(empty)") : reply.text});
        messages.push_back({MessageRole::User, prompts.get("rubric_reminder")});
        reply = gateway.chat(role, messages, tag + ".retry");
        return parse_judgment(reply.text);
    }
}

double score_utterance(Gateway& gateway, std::string_view profile_text, std::span<const Utterance> context,
                       std::string_view utterance, std::string tag, ModelRole role, const PromptLibrary& prompts) {
    return judge(gateway, profile_text, context, utterance, std::move(tag), role, prompts).overall;
}

double distance_reward(double predicted, double gold) {
    if (!(predicted >= 0.0 && predicted <= 1.0) || !(gold >= 0.0 && gold <= 1.0)) {
        fail(ErrorKind::OutOfRange, "distance_reward arguments must lie in [0, 1]");
    }
    return 1.0 - std::abs(predicted - gold);
}

// ---------------------------------------------------------------------------

std::string_view to_string(RmSplit s) noexcept { return s == RmSplit::SftWarmup ? "sft_warmup" : "rlvr"; }

json rm_example_to_json(const RmExample& e) {
    return json{{"id", e.id},
                {"profile_text", e.profile_text},
                {"context_messages", utterances_to_json(e.context)},
                {"candidate_utterance", e.candidate_utterance},
                {"gold", judgment_to_json(e.gold)},
                {"split", std::string(to_string(e.split))}};
}

RmExample rm_example_from_json(const json& j) {
    RmExample e;
    e.id = j.value("id", std::string());
    e.profile_text = j.at("profile_text").get<std::string>();
    e.context = utterances_from_json(j.value("context_messages", json::array()));
    e.candidate_utterance = j.at("candidate_utterance").get<std::string>();
    e.gold = judgment_from_json(j.at("gold"));
    const auto split = j.value("split", std::string("sft_warmup"));
    if (split == "sft_warmup") {
        e.split = RmSplit::SftWarmup;
    } else if (split == "rlvr") {
        e.split = RmSplit::Rlvr;
    } else {
        fail(ErrorKind::FormatError, "unknown split '" + split + "'");
    }
    return e;
}

RmTrainingSets build_rm_training_sets(std::span<const RmExample> examples, const PromptLibrary& prompts) {
    RmTrainingSets sets;
    for (const auto& e : examples) {
        const auto messages = build_judge_prompt(e.profile_text, e.context, e.candidate_utterance, prompts);
        if (e.split == RmSplit::SftWarmup) {
            if (text::is_blank(e.gold.rationale)) {
                fail(ErrorKind::MissingRationale, "warm-up example '" + e.id + "' has no expert rationale");
            }
            sets.sft.push_back({{"id", e.id}, {"messages", messages_to_json(messages)}, {"target", format_judgment(e.gold)}});
        } else {
            sets.rlvr.push_back({{"id", e.id},
                                 {"messages", messages_to_json(messages)},
                                 {"gold",
                                  {{"hl", e.gold.human_likeness},
                                   {"pc", e.gold.persona_consistency},
                                   {"cc", e.gold.context_coherence}}}});
        }
    }
    return sets;
}

// ---------------------------------------------------------------------------

RmEvalReport evaluate_rm(std::span<const RubricJudgment> predictions, std::span<const RubricJudgment> golds) {
    if (predictions.size() != golds.size()) {
        fail(ErrorKind::LengthMismatch, std::to_string(predictions.size()) + " predictions for " +
                                            std::to_string(golds.size()) + " gold judgments");
    }
    if (golds.empty()) fail(ErrorKind::EmptySet, "no judgments to evaluate");

    RmEvalReport r;
    r.n = golds.size();
    for (std::size_t i = 0; i < golds.size(); ++i) {
        const auto p = predictions[i].scores();
        const auto g = golds[i].scores();
        for (std::size_t d = 0; d < 3; ++d) {
            r.dimensions[d].acc += distance_reward(p[d], g[d]);
            if (p[d] == g[d]) r.dimensions[d].em += 1.0;
        }
    }
    const auto n = static_cast<double>(r.n);
    for (auto& d : r.dimensions) {
        d.acc /= n;
        d.em /= n;
        r.overall.acc += d.acc / 3.0;
        r.overall.em += d.em / 3.0;
    }
    return r;
}

json rm_report_to_json(const RmEvalReport& r) {
    json dims = json::object();
    for (std::size_t d = 0; d < 3; ++d) dims[kDimensionNames[d]] = {{"acc", r.dimensions[d].acc}, {"em", r.dimensions[d].em}};
    return json{{"n", r.n}, {"dimensions", std::move(dims)}, {"overall", {{"acc", r.overall.acc}, {"em", r.overall.em}}}};
}

}  // namespace muse::rubric
