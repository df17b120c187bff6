#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "muse/error.hpp"
#include "muse/gateway.hpp"

#include <cstdlib>

namespace muse {

using nlohmann::json;

HttpBackend::HttpBackend(HttpBackendOptions options) : options_(std::move(options)) {
    const auto& url = options_.base_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) fail(ErrorKind::ConfigError, "base_url needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? std::string() : url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    if (options_.model.empty()) fail(ErrorKind::ConfigError, "http backend needs a model name");
}

std::string HttpBackend::name() const { return "http:" + options_.model; }

json HttpBackend::post(const std::string& path, const json& body) const {
    httplib::Client client(origin_);
    client.set_connection_timeout(options_.timeout_seconds, 0);
    client.set_read_timeout(options_.timeout_seconds, 0);
    client.set_write_timeout(options_.timeout_seconds, 0);

    httplib::Headers headers;
    if (!options_.api_key_env.empty()) {
        if (const char* key = std::getenv(options_.api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }
    auto res = client.Post(path_prefix_ + path, headers, body.dump(), "application/json");
    if (!res) {
        throw Error(ErrorKind::BackendUnavailable, "request to " + origin_ + " failed: " + httplib::to_string(res.error()),
                    /*transient=*/true);
    }
    if (res->status == 429 || res->status >= 500) {
        throw Error(ErrorKind::BackendUnavailable, "HTTP " + std::to_string(res->status), /*transient=*/true);
    }
    if (res->status != 200) {
        fail(ErrorKind::ContractViolation, "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
        return json::parse(res->body);
    } catch (const json::exception& e) {
        fail(ErrorKind::ContractViolation, std::string("malformed backend reply: ") + e.what());
    }
}

Completion HttpBackend::complete(const CompletionRequest& request) {
    json messages = json::array();
    for (const auto& m : request.messages) {
        messages.push_back({{"role", std::string(to_string(m.role))},
                            {"content", m.placeholder ? options_.opening_prompt : m.content}});
    }
    // Most chat endpoints reject a conversation that ends on the system prompt.
    if (request.messages.back().role == MessageRole::System) {
        messages.push_back({{"role", "user"}, {"content", options_.opening_prompt}});
    }
    json body{{"model", options_.model},
              {"messages", std::move(messages)},
              {"temperature", request.temperature},
              {"max_tokens", request.max_tokens}};
    if (request.stop) body["stop"] = *request.stop;

    const json reply = post("/chat/completions", body);
    try {
        const auto& choice = reply.at("choices").at(0);
        Completion c;
        const auto& content = choice.at("message").at("content");
        c.text = content.is_null() ? std::string() : content.get<std::string>();
        const auto reason = choice.value("finish_reason", std::string("stop"));
        c.finish_reason = reason == "length" ? FinishReason::Length : FinishReason::Stop;
        if (reply.contains("usage") && reply["usage"].is_object()) {
            c.usage.prompt_tokens = reply["usage"].value("prompt_tokens", 0LL);
            c.usage.completion_tokens = reply["usage"].value("completion_tokens", 0LL);
        }
        return c;
    } catch (const json::exception& e) {
        fail(ErrorKind::ContractViolation, std::string("unexpected chat-completions reply: ") + e.what());
    }
}

std::string HttpBackend::render_score_prompt(std::span<const ChatMessage> prefix) {
    std::string out;
    for (const auto& m : prefix) {
        out += to_string(m.role);
        out += ": ";
        out += m.content;
        out += '\n';
    }
    // The continuation is always produced on the user-simulator's turn, which
    // is the wire "assistant" role after role reversal.
    out += "assistant: ";
    return out;
}

ScoredContinuation HttpBackend::score_continuation(const ScoreRequest& request) {
    if (!options_.logprobs) {
        fail(ErrorKind::UnsupportedCapability, "http backend '" + options_.model + "' has logprob scoring disabled");
    }
    const std::string prompt = render_score_prompt(request.prefix);
    json body{{"model", options_.model},
              {"prompt", prompt + request.continuation},
              {"max_tokens", 1},
              {"temperature", 0.0},
              {"echo", true},
              {"logprobs", 0}};
    const json reply = post("/completions", body);
    try {
        const auto& lp = reply.at("choices").at(0).at("logprobs");
        const auto& tokens = lp.at("tokens");
        const auto& logprobs = lp.at("token_logprobs");
        const auto& offsets = lp.at("text_offset");
        const auto begin = prompt.size();
        const auto end = prompt.size() + request.continuation.size();
        ScoredContinuation out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto offset = offsets.at(i).get<std::size_t>();
            if (offset < begin || offset >= end) continue;
            if (logprobs.at(i).is_null()) fail(ErrorKind::ContractViolation, "missing logprob for continuation token");
            out.tokens.push_back({tokens.at(i).get<std::string>(), logprobs.at(i).get<double>()});
        }
        if (out.tokens.empty() && !request.continuation.empty()) {
            fail(ErrorKind::ContractViolation, "backend returned no continuation tokens");
        }
        return out;
    } catch (const json::exception& e) {
        fail(ErrorKind::ContractViolation, std::string("unexpected completions reply: ") + e.what());
    }
}

}  // namespace muse
