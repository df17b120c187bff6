#include "muse/config.hpp"

#include "muse/error.hpp"
#include "muse/text.hpp"

#include <toml.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace muse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string interpolate_env(std::string_view s) {
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s.compare(i, 2, "${") == 0) {
            const auto end = s.find('}', i + 2);
            if (end == std::string_view::npos) fail(ErrorKind::ConfigError, "unterminated ${ in '" + std::string(s) + "'");
            const std::string name(s.substr(i + 2, end - i - 2));
            const char* value = std::getenv(name.c_str());
            if (!value) fail(ErrorKind::ConfigError, "environment variable " + name + " is not set");
            out += value;
            i = end + 1;
        } else {
            out.push_back(s[i++]);
        }
    }
    return out;
}

namespace {

class Section {
public:
    Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

    [[nodiscard]] bool present() const { return table_ != nullptr; }

    void allow(std::initializer_list<const char*> keys) const {
        if (!table_) return;
        const std::set<std::string_view> allowed(keys.begin(), keys.end());
        for (const auto& [key, node] : *table_) {
            if (!allowed.contains(key.str())) fail(ErrorKind::ConfigError, "unknown key '" + where(key.str()) + "'");
        }
    }

    std::optional<std::string> str(const char* key) const {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_string()) fail(ErrorKind::ConfigError, where(key) + " must be a string");
        return interpolate_env(n->value<std::string>().value());
    }

    std::optional<double> num(const char* key) const {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (n->is_integer()) return static_cast<double>(n->value<int64_t>().value());
        if (!n->is_floating_point()) fail(ErrorKind::ConfigError, where(key) + " must be a number");
        return n->value<double>().value();
    }

    std::optional<int64_t> integer(const char* key, int64_t min = 0) const {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_integer()) fail(ErrorKind::ConfigError, where(key) + " must be an integer");
        const auto v = n->value<int64_t>().value();
        if (v < min) fail(ErrorKind::ConfigError, where(key) + " must be >= " + std::to_string(min));
        return v;
    }

    std::optional<bool> boolean(const char* key) const {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_boolean()) fail(ErrorKind::ConfigError, where(key) + " must be a boolean");
        return n->value<bool>().value();
    }

    std::vector<std::string> strings(const char* key) const {
        const auto* n = node(key);
        if (!n) return {};
        if (n->is_string()) return {interpolate_env(n->value<std::string>().value())};
        const auto* arr = n->as_array();
        if (!arr) fail(ErrorKind::ConfigError, where(key) + " must be a string or an array of strings");
        std::vector<std::string> out;
        for (const auto& item : *arr) {
            if (!item.is_string()) fail(ErrorKind::ConfigError, where(key) + " must contain strings only");
            out.push_back(interpolate_env(item.value<std::string>().value()));
        }
        return out;
    }

    [[nodiscard]] std::string where(std::string_view key) const {
        return name_.empty() ? std::string(key) : name_ + "." + std::string(key);
    }

private:
    const toml::node* node(const char* key) const { return table_ ? table_->get(key) : nullptr; }

    const toml::table* table_;
    std::string name_;
};

Section section(const toml::table& root, const char* name) {
    const auto* n = root.get(name);
    if (n && !n->is_table()) fail(ErrorKind::ConfigError, std::string(name) + " must be a table");
    return Section(n ? n->as_table() : nullptr, name);
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return (path.is_absolute() ? path : base / path).lexically_normal();
}

std::string relative_or_absolute(const fs::path& base, const fs::path& p) {
    const auto rel = p.lexically_relative(base);
    return rel.empty() ? p.generic_string() : rel.generic_string();
}

}  // namespace

RunConfig parse_config(std::string_view toml_text, const fs::path& base_dir) {
    toml::table root;
    try {
        root = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "invalid TOML at line " << e.source().begin.line << ": " << e.description();
        fail(ErrorKind::ConfigError, msg.str());
    }

    RunConfig c;
    c.base_dir = base_dir;
    const Section top(&root, "");
    top.allow({"version", "workers", "backends", "gateway", "ipse", "rollout", "grpo", "partition", "difficulty", "corpus",
               "paths", "eval"});
    if (const auto v = top.integer("version"); v && *v != kConfigVersion) {
        fail(ErrorKind::ConfigError, "unsupported config version " + std::to_string(*v));
    }
    if (const auto w = top.integer("workers", 1)) c.workers = static_cast<std::size_t>(*w);

    json canonical_backends = json::object();
    if (const auto* backends = root.get("backends")) {
        if (!backends->is_table()) fail(ErrorKind::ConfigError, "backends must be a table");
        for (const auto& [key, node] : *backends->as_table()) {
            const auto role = parse_model_role(key.str());
            if (!role) fail(ErrorKind::ConfigError, "unknown model role 'backends." + std::string(key.str()) + "'");
            if (!node.is_table()) fail(ErrorKind::ConfigError, "backends." + std::string(key.str()) + " must be a table");
            const Section s(node.as_table(), "backends." + std::string(key.str()));
            s.allow({"kind", "script", "base_url", "model", "api_key_env", "temperature", "max_tokens", "logprobs",
                     "timeout_seconds", "vocab"});
            BackendConfig b;
            b.kind = s.str("kind").value_or("scripted");
            if (b.kind != "scripted" && b.kind != "http" && b.kind != "uniform") {
                fail(ErrorKind::ConfigError, s.where("kind") + " must be scripted, http or uniform");
            }
            if (const auto p = s.str("script")) b.script = resolve(base_dir, *p);
            b.base_url = s.str("base_url").value_or("");
            b.model = s.str("model").value_or("");
            b.api_key_env = s.str("api_key_env").value_or("");
            b.temperature = s.num("temperature").value_or(0.0);
            if (b.temperature < 0) fail(ErrorKind::ConfigError, s.where("temperature") + " must be non-negative");
            b.max_tokens = static_cast<int>(s.integer("max_tokens", 1).value_or(1024));
            b.logprobs = s.boolean("logprobs").value_or(false);
            b.timeout_seconds = static_cast<int>(s.integer("timeout_seconds", 1).value_or(120));
            b.vocab = static_cast<std::size_t>(s.integer("vocab", 0).value_or(0));
            if (b.kind == "scripted" && b.script.empty()) fail(ErrorKind::ConfigError, s.where("script") + " is required");
            if (b.kind == "http" && b.base_url.empty()) fail(ErrorKind::ConfigError, s.where("base_url") + " is required");
            if (b.kind == "uniform" && b.vocab < 2) fail(ErrorKind::ConfigError, s.where("vocab") + " must be >= 2");
            c.backends[*role] = b;
            canonical_backends[std::string(key.str())] = {
                {"kind", b.kind},
                {"script", b.script.empty() ? "" : relative_or_absolute(base_dir, b.script)},
                {"base_url", b.base_url},
                {"model", b.model},
                {"api_key_env", b.api_key_env},
                {"temperature", b.temperature},
                {"max_tokens", b.max_tokens},
                {"logprobs", b.logprobs},
                {"vocab", b.vocab}};
        }
    }

    const auto g = section(root, "gateway");
    g.allow({"max_in_flight", "max_retries", "base_delay_ms", "backoff", "logical_clock"});
    c.gateway.max_in_flight = static_cast<std::size_t>(g.integer("max_in_flight", 1).value_or(4));
    c.gateway.retry.max_retries = static_cast<int>(g.integer("max_retries", 0).value_or(3));
    c.gateway.retry.base_delay = std::chrono::milliseconds(g.integer("base_delay_ms", 0).value_or(200));
    c.gateway.retry.multiplier = g.num("backoff").value_or(2.0);
    c.gateway.logical_clock = g.boolean("logical_clock").value_or(true);

    const auto ip = section(root, "ipse");
    ip.allow({"rounds", "selection", "prompts_dir"});
    c.ipse_rounds = static_cast<std::size_t>(ip.integer("rounds", 0).value_or(2));
    if (const auto sel = ip.str("selection")) {
        const auto parsed = ipse::parse_final_selection(*sel);
        if (!parsed) fail(ErrorKind::ConfigError, "ipse.selection must be 'last' or 'ppl'");
        c.ipse_selection = *parsed;
    }
    if (const auto p = ip.str("prompts_dir")) c.prompts_dir = resolve(base_dir, *p);

    const auto ro = section(root, "rollout");
    ro.allow({"max_turns", "max_context_units", "unit", "stop_marker", "max_empty_retries", "assistant_instruction"});
    c.rollout.max_turns = static_cast<std::size_t>(ro.integer("max_turns", 1).value_or(8));
    c.rollout.max_context_units = static_cast<std::size_t>(ro.integer("max_context_units", 1).value_or(16000));
    if (const auto u = ro.str("unit")) {
        if (*u == "characters") {
            c.rollout.unit = ContextUnit::Characters;
        } else if (*u == "tokens") {
            c.rollout.unit = ContextUnit::Tokens;
        } else {
            fail(ErrorKind::ConfigError, "rollout.unit must be 'characters' or 'tokens'");
        }
    }
    c.rollout.stop_marker = ro.str("stop_marker").value_or("[END]");
    c.rollout.max_empty_retries = static_cast<std::size_t>(ro.integer("max_empty_retries", 0).value_or(1));
    c.assistant_instruction = ro.str("assistant_instruction").value_or(std::string(kDefaultAssistantInstruction));

    const auto gr = section(root, "grpo");
    gr.allow({"enabled", "group_size", "eps"});
    c.grpo_enabled = gr.boolean("enabled").value_or(true);
    c.group_size = static_cast<std::size_t>(gr.integer("group_size", 0).value_or(4));
    if (c.group_size < 2) fail(ErrorKind::ConfigError, "grpo.group_size must be >= 2");
    c.grpo_eps = gr.num("eps").value_or(1e-8);
    if (!(c.grpo_eps > 0)) fail(ErrorKind::ConfigError, "grpo.eps must be positive");

    const auto pa = section(root, "partition");
    pa.allow({"rl_fraction", "per_domain"});
    c.rl_fraction = pa.num("rl_fraction").value_or(0.10);
    if (!(c.rl_fraction > 0 && c.rl_fraction < 1)) fail(ErrorKind::ConfigError, "partition.rl_fraction must lie in (0, 1)");
    c.per_domain = pa.boolean("per_domain").value_or(false);

    const auto di = section(root, "difficulty");
    di.allow({"constraint_density", "information_withholding", "intent_volatility"});
    c.difficulty_weights = {di.num("constraint_density").value_or(1.0), di.num("information_withholding").value_or(1.0),
                            di.num("intent_volatility").value_or(1.0)};

    const auto co = section(root, "corpus");
    co.allow({"paths", "min_turns"});
    for (const auto& p : co.strings("paths")) c.corpus.push_back(resolve(base_dir, p));
    c.min_turns = static_cast<std::size_t>(co.integer("min_turns", 1).value_or(4));

    const auto pt = section(root, "paths");
    pt.allow({"output_dir", "run_id"});
    c.output_dir = resolve(base_dir, pt.str("output_dir").value_or("runs"));
    c.run_id_override = pt.str("run_id").value_or("");

    const auto ev = section(root, "eval");
    ev.allow({"detector", "embedder", "ava_threshold"});
    c.detector_command = ev.str("detector").value_or("");
    c.embedder_command = ev.str("embedder").value_or("");
    c.ava_threshold = ev.num("ava_threshold");

    json corpus = json::array();
    for (const auto& p : c.corpus) corpus.push_back(relative_or_absolute(base_dir, p));
    c.canonical = json{
        {"version", kConfigVersion},
        {"backends", std::move(canonical_backends)},
        {"gateway",
         {{"max_in_flight", c.gateway.max_in_flight},
          {"max_retries", c.gateway.retry.max_retries},
          {"logical_clock", c.gateway.logical_clock}}},
        {"ipse",
         {{"rounds", c.ipse_rounds},
          {"selection", std::string(ipse::to_string(c.ipse_selection))},
          {"prompts_dir", c.prompts_dir ? relative_or_absolute(base_dir, *c.prompts_dir) : ""}}},
        {"rollout",
         {{"max_turns", c.rollout.max_turns},
          {"max_context_units", c.rollout.max_context_units},
          {"unit", c.rollout.unit == ContextUnit::Tokens ? "tokens" : "characters"},
          {"stop_marker", c.rollout.stop_marker},
          {"max_empty_retries", c.rollout.max_empty_retries},
          {"assistant_instruction", c.assistant_instruction}}},
        {"grpo", {{"enabled", c.grpo_enabled}, {"group_size", c.group_size}, {"eps", c.grpo_eps}}},
        {"partition", {{"rl_fraction", c.rl_fraction}, {"per_domain", c.per_domain}}},
        {"difficulty", c.difficulty_weights},
        {"corpus", {{"paths", std::move(corpus)}, {"min_turns", c.min_turns}}},
        {"eval",
         {{"detector", c.detector_command},
          {"embedder", c.embedder_command},
          {"ava_threshold", c.ava_threshold ? json(*c.ava_threshold) : json(nullptr)}}},
    };
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot read config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    const auto absolute = fs::absolute(path).lexically_normal();
    auto config = parse_config(buffer.str(), absolute.parent_path());
    config.config_path = absolute;
    return config;
}

namespace {

std::string file_hash(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot read " + p.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return text::sha256_hex(buffer.str());
}

}  // namespace

std::string compute_run_id(const RunConfig& config) {
    json material{{"config", config.canonical}};
    json files = json::object();
    std::set<fs::path> referenced;
    for (const auto& [role, b] : config.backends) {
        if (!b.script.empty()) referenced.insert(b.script);
    }
    for (const auto& p : config.corpus) referenced.insert(p);
    if (config.prompts_dir && fs::is_directory(*config.prompts_dir)) {
        for (const auto& entry : fs::directory_iterator(*config.prompts_dir)) {
            if (entry.is_regular_file()) referenced.insert(entry.path());
        }
    }
    for (const auto& p : referenced) {
        if (fs::exists(p)) files[relative_or_absolute(config.base_dir, p)] = file_hash(p);
    }
    material["files"] = std::move(files);
    return text::sha256_hex(material.dump()).substr(0, 16);
}

fs::path run_directory(const RunConfig& config) {
    return config.output_dir / (config.run_id_override.empty() ? compute_run_id(config) : config.run_id_override);
}

PromptLibrary load_prompts(const RunConfig& config) {
    return config.prompts_dir ? PromptLibrary::load(*config.prompts_dir) : PromptLibrary::defaults();
}

std::unique_ptr<Gateway> build_gateway(const RunConfig& config, std::shared_ptr<Transcript> transcript) {
    auto gateway = std::make_unique<Gateway>(config.gateway, std::move(transcript));
    std::map<fs::path, std::shared_ptr<Backend>> scripts;
    for (const auto& [role, b] : config.backends) {
        std::shared_ptr<Backend> backend;
        if (b.kind == "scripted") {
            auto& shared = scripts[b.script];
            if (!shared) shared = scripted_backend(load_script(b.script));
            backend = shared;
        } else if (b.kind == "uniform") {
            Script s;
            s.uniform_vocab = b.vocab;
            backend = scripted_backend(std::move(s));
        } else {
            HttpBackendOptions options;
            options.base_url = b.base_url;
            options.model = b.model;
            options.api_key_env = b.api_key_env;
            options.timeout_seconds = b.timeout_seconds;
            options.logprobs = b.logprobs;
            backend = std::make_shared<HttpBackend>(options);
        }
        gateway->bind(role, RoleBinding{backend, b.temperature, b.max_tokens});
    }
    return gateway;
}

}  // namespace muse
