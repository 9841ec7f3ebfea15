#include "kgcot/llm_gateway.hpp"

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <thread>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* to_string(Role role) {
    switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(const std::string& text) {
    if (text == "system") return Role::system;
    if (text == "user") return Role::user;
    if (text == "assistant") return Role::assistant;
    throw InputError("invalid message role: " + text);
}

void ProviderConfig::validate() const {
    if (max_in_flight == 0 || max_in_flight > 4096) throw InputError("provider.max_in_flight must be in [1, 4096]");
    if (retries < 1) throw InputError("provider.retries must be >= 1");
    if (kind == Kind::mock) {
        if (scenario.empty()) throw InputError("mock provider requires a scenario file");
        return;
    }
    std::string base = base_url;
    if (base.empty()) {
        if (const char* env = std::getenv("KGCOT_API_BASE")) base = env;
    }
    if (base.empty()) throw InputError("http provider requires base_url (or KGCOT_API_BASE)");
    if (api_key_env.empty()) throw InputError("http provider requires an api key reference");
}

namespace {

std::string excerpt(const std::string& body, std::size_t limit = 200) {
    return body.size() <= limit ? body : body.substr(0, limit) + "...";
}

std::string normalized_token(const std::string& token) {
    std::string out;
    for (char c : to_lower(token)) {
        if (std::isalpha(static_cast<unsigned char>(c))) out.push_back(c);
    }
    return out;
}

json messages_json(const std::vector<ChatMessage>& messages) {
    json out = json::array();
    for (const auto& m : messages) out.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    return out;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buffer[32];
    std::strftime(buffer, sizeof buffer, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buffer;
}

} // namespace

OpenAiCompatibleBackend::OpenAiCompatibleBackend(std::string base_url, std::string api_key, std::string model,
                                                 std::string embedding_model, int timeout_s,
                                                 bool request_logprobs)
    : base_url_(std::move(base_url)),
      api_key_(std::move(api_key)),
      model_(std::move(model)),
      embedding_model_(std::move(embedding_model)),
      timeout_s_(timeout_s),
      request_logprobs_(request_logprobs) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    const auto scheme_end = base_url_.find("://");
    if (scheme_end == std::string::npos) throw InputError("base_url needs a scheme: " + base_url_);
    const auto path_start = base_url_.find('/', scheme_end + 3);
    origin_ = base_url_.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : base_url_.substr(path_start);
}

std::string OpenAiCompatibleBackend::post(const std::string& path, const std::string& body) {
    httplib::Client client(origin_);
    client.set_connection_timeout(timeout_s_, 0);
    client.set_read_timeout(timeout_s_, 0);
    client.set_write_timeout(timeout_s_, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto result = client.Post(path_prefix_ + path, headers, body, "application/json");
    if (!result) {
        throw TransientProviderError("POST " + path + " failed: " + httplib::to_string(result.error()));
    }
    const int status = result->status;
    if (status == 429 || status >= 500) {
        throw TransientProviderError("POST " + path + " returned HTTP " + std::to_string(status) + ": " +
                                     excerpt(result->body));
    }
    if (status < 200 || status >= 300) {
        throw ProviderError("POST " + path + " returned HTTP " + std::to_string(status) + ": " +
                            excerpt(result->body));
    }
    return result->body;
}

ChatResponse OpenAiCompatibleBackend::chat(const ChatRequest& request) {
    json body{{"model", model_},
              {"messages", messages_json(request.messages)},
              {"temperature", request.temperature},
              {"max_tokens", request.max_output}};
    if (request_logprobs_) {
        body["logprobs"] = true;
        body["top_logprobs"] = 5;
    }
    const auto raw = post("/chat/completions", body.dump());
    json reply;
    try {
        reply = json::parse(raw);
    } catch (const json::parse_error&) {
        throw ProviderError("chat reply is not JSON: " + excerpt(raw));
    }
    if (reply.contains("error")) throw ProviderError("provider error payload: " + excerpt(reply["error"].dump()));
    if (!reply.contains("choices") || reply["choices"].empty()) {
        throw ProviderError("chat reply without choices: " + excerpt(raw));
    }
    const auto& choice = reply["choices"][0];
    const auto& content = choice.value("/message/content"_json_pointer, json(nullptr));
    if (!content.is_string()) throw ProviderError("chat reply without message content: " + excerpt(raw));

    ChatResponse response{content.get<std::string>(), std::nullopt, id(), false};

    // Alternatives at the final yes/no token, for probability derivation.
    const auto logprobs = choice.value("/logprobs/content"_json_pointer, json(nullptr));
    if (logprobs.is_array()) {
        for (auto it = logprobs.rbegin(); it != logprobs.rend(); ++it) {
            const auto token = normalized_token(it->value("token", ""));
            if (token != "yes" && token != "no") continue;
            std::vector<TokenScore> scores{{it->value("token", ""), it->value("logprob", 0.0)}};
            for (const auto& alt : it->value("top_logprobs", json::array())) {
                scores.push_back({alt.value("token", ""), alt.value("logprob", 0.0)});
            }
            response.token_scores = std::move(scores);
            break;
        }
    }
    return response;
}

std::vector<Embedding> OpenAiCompatibleBackend::embed(const std::vector<std::string>& texts) {
    const json body{{"model", embedding_model_}, {"input", texts}};
    const auto raw = post("/embeddings", body.dump());
    json reply;
    try {
        reply = json::parse(raw);
    } catch (const json::parse_error&) {
        throw ProviderError("embedding reply is not JSON: " + excerpt(raw));
    }
    if (!reply.contains("data") || !reply["data"].is_array() || reply["data"].size() != texts.size()) {
        throw ProviderError("embedding reply has wrong shape: " + excerpt(raw));
    }
    std::vector<Embedding> out(texts.size());
    for (std::size_t i = 0; i < reply["data"].size(); ++i) {
        const auto& item = reply["data"][i];
        const auto index = item.value("index", i);
        if (index >= out.size()) throw ProviderError("embedding index out of range");
        out[index] = item.at("embedding").get<Embedding>();
    }
    return out;
}

std::shared_ptr<MockBackend> MockBackend::from_scenario(const std::filesystem::path& scenario) {
    if (!std::filesystem::exists(scenario)) throw InputError("missing scenario file: " + scenario.string());
    return from_json(read_file(scenario));
}

std::shared_ptr<MockBackend> MockBackend::from_json(const std::string& scenario_text) {
    json in;
    try {
        in = json::parse(scenario_text);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("scenario does not parse: ") + e.what());
    }
    auto mock = std::make_shared<MockBackend>();
    try {
        mock->id_ = "mock:" + sha256_hex(scenario_text).substr(0, 12);
        mock->dim_ = in.value("embedding_dim", std::size_t{16});
        mock->seed_ = in.value("seed", std::uint64_t{0});
        if (mock->dim_ == 0) throw InputError("scenario embedding_dim must be positive");
        for (const auto& r : in.value("rules", json::array())) {
            Rule rule;
            if (r.contains("tag") && !r["tag"].is_null()) rule.tag = r["tag"].get<std::string>();
            if (r.contains("contains")) {
                if (r["contains"].is_string()) {
                    rule.contains.push_back(r["contains"].get<std::string>());
                } else {
                    rule.contains = r["contains"].get<std::vector<std::string>>();
                }
            }
            rule.reply = r.value("reply", "");
            rule.fail = r.value("fail", false);
            if (r.contains("token_scores")) {
                std::vector<TokenScore> scores;
                for (const auto& s : r["token_scores"]) {
                    scores.push_back({s.at("token").get<std::string>(), s.at("logprob").get<double>()});
                }
                rule.token_scores = std::move(scores);
            }
            mock->rules_.push_back(std::move(rule));
        }
        if (in.contains("default_reply") && in["default_reply"].is_string()) {
            mock->default_reply_ = in["default_reply"].get<std::string>();
        }
        const auto aliases = in.value("embedding_aliases", json::object());
        for (const auto& [text, blend] : aliases.items()) {
            auto& target = mock->aliases_[normalize_label(text)];
            for (const auto& [other, weight] : blend.items()) target[normalize_label(other)] = weight.get<double>();
        }
        const auto overrides = in.value("embedding_overrides", json::object());
        for (const auto& [text, vector] : overrides.items()) {
            auto values = vector.get<Embedding>();
            if (values.size() != mock->dim_) throw InputError("embedding override for \"" + text + "\" has wrong dimension");
            mock->overrides_[normalize_label(text)] = std::move(values);
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed scenario: ") + e.what());
    }
    return mock;
}

ChatResponse MockBackend::chat(const ChatRequest& request) {
    std::string haystack;
    for (const auto& m : request.messages) {
        haystack += m.content;
        haystack += '\n';
    }
    for (const auto& rule : rules_) {
        if (rule.tag && *rule.tag != request.tag) continue;
        const bool matches = std::all_of(rule.contains.begin(), rule.contains.end(),
                                         [&](const std::string& needle) { return haystack.find(needle) != std::string::npos; });
        if (!matches) continue;
        if (rule.fail) throw TransientProviderError("scripted provider failure for tag \"" + request.tag + "\"");
        return {rule.reply, rule.token_scores, id_, false};
    }
    if (default_reply_) return {*default_reply_, std::nullopt, id_, false};
    throw ProviderError("mock scenario has no rule matching request tagged \"" + request.tag +
                        "\" and no default_reply");
}

Embedding MockBackend::hashed(const std::string& normalized) const {
    SplitMix64 rng(fnv1a64(normalized, seed_));
    Embedding v(dim_);
    for (auto& x : v) x = rng.symmetric_unit();
    return v;
}

Embedding MockBackend::embed_one(const std::string& text) const {
    const auto key = normalize_label(text);
    if (const auto it = overrides_.find(key); it != overrides_.end()) return it->second;
    if (const auto it = aliases_.find(key); it != aliases_.end()) {
        Embedding v(dim_, 0.0);
        for (const auto& [other, weight] : it->second) {
            const auto base = hashed(other);
            for (std::size_t i = 0; i < dim_; ++i) v[i] += weight * base[i];
        }
        return v;
    }
    return hashed(key);
}

std::vector<Embedding> MockBackend::embed(const std::vector<std::string>& texts) {
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

std::shared_ptr<ChatBackend> make_backend(const ProviderConfig& config) {
    config.validate();
    if (config.kind == ProviderConfig::Kind::mock) return MockBackend::from_scenario(config.scenario);
    std::string base = config.base_url;
    if (base.empty()) base = std::getenv("KGCOT_API_BASE");
    const char* key = std::getenv(config.api_key_env.c_str());
    if (!key || !*key) spdlog::warn("environment variable {} is not set; sending requests without a key", config.api_key_env);
    return std::make_shared<OpenAiCompatibleBackend>(base, key ? key : "", config.model, config.embedding_model,
                                                     config.timeout_s, config.request_logprobs);
}

LlmGateway::LlmGateway(std::shared_ptr<ChatBackend> backend, const ProviderConfig& config)
    : backend_(std::move(backend)),
      max_in_flight_(config.max_in_flight),
      attempts_(std::max(1, config.retries)),
      backoff_ms_(config.backoff_ms),
      embed_batch_(std::max<std::size_t>(1, config.embed_batch)),
      cache_dir_(config.cache_dir),
      in_flight_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config.max_in_flight, 1, 4096))) {
    if (!cache_dir_.empty()) std::filesystem::create_directories(cache_dir_ / "embeddings");
}

GatewayStats LlmGateway::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

std::string LlmGateway::cache_key(const std::string& provider_id, const std::string& model,
                                  const ChatRequest& request) {
    ordered_json key;
    key["provider"] = provider_id;
    key["model"] = model;
    key["messages"] = messages_json(request.messages);
    key["temperature"] = request.temperature;
    return sha256_hex(key.dump());
}

template <typename Fn>
auto LlmGateway::with_retries(Fn&& fn) -> decltype(fn()) {
    std::string last_error;
    for (int attempt = 1; attempt <= attempts_; ++attempt) {
        try {
            in_flight_.acquire();
            struct Release {
                std::counting_semaphore<4096>& s;
                ~Release() { s.release(); }
            } release{in_flight_};
            return fn();
        } catch (const TransientProviderError& e) {
            last_error = e.what();
            if (attempt == attempts_) break;
            {
                std::lock_guard lock(mutex_);
                ++stats_.retries;
            }
            const auto delay = static_cast<long long>(backoff_ms_) << (attempt - 1);
            spdlog::debug("provider attempt {} failed ({}); retrying in {} ms", attempt, last_error, delay);
            if (delay > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
    }
    throw ProviderError("provider failed after " + std::to_string(attempts_) + " attempts: " + last_error);
}

std::optional<ChatResponse> LlmGateway::cache_lookup(const std::string& key) {
    {
        std::lock_guard lock(mutex_);
        if (const auto it = chat_cache_.find(key); it != chat_cache_.end()) return it->second;
    }
    if (cache_dir_.empty()) return std::nullopt;
    const auto path = cache_dir_ / (key + ".json");
    if (!std::filesystem::exists(path)) return std::nullopt;
    try {
        const auto stored = json::parse(read_file(path));
        const auto& r = stored.at("response");
        ChatResponse response{r.at("text").get<std::string>(), std::nullopt, r.value("provider_id", ""), false};
        if (r.contains("token_scores") && r["token_scores"].is_array()) {
            std::vector<TokenScore> scores;
            for (const auto& s : r["token_scores"]) scores.push_back({s.at("token"), s.at("logprob")});
            response.token_scores = std::move(scores);
        }
        std::lock_guard lock(mutex_);
        chat_cache_.emplace(key, response);
        return response;
    } catch (const std::exception& e) {
        spdlog::warn("ignoring unreadable cache entry {}: {}", path.string(), e.what());
        return std::nullopt;
    }
}

void LlmGateway::cache_store(const std::string& key, const ChatRequest& request, const ChatResponse& response) {
    {
        std::lock_guard lock(mutex_);
        chat_cache_.emplace(key, response);
    }
    if (cache_dir_.empty()) return;
    ordered_json entry;
    entry["request"] = {{"provider", backend_->id()},
                        {"model", backend_->model()},
                        {"tag", request.tag},
                        {"temperature", request.temperature},
                        {"messages", messages_json(request.messages)}};
    ordered_json r;
    r["text"] = response.text;
    r["provider_id"] = response.provider_id;
    if (response.token_scores) {
        r["token_scores"] = json::array();
        for (const auto& s : *response.token_scores) r["token_scores"].push_back({{"token", s.token}, {"logprob", s.logprob}});
    }
    entry["response"] = r;
    entry["timestamp"] = utc_timestamp();
    write_file_atomic(cache_dir_ / (key + ".json"), entry.dump(2));
}

ChatResponse LlmGateway::chat(const ChatRequest& request) {
    if (request.messages.empty()) throw InputError("chat request needs at least one message");
    const auto key = cache_key(backend_->id(), backend_->model(), request);
    if (auto hit = cache_lookup(key)) {
        std::lock_guard lock(mutex_);
        ++stats_.chat_cache_hits;
        hit->cached = true;
        return *hit;
    }
    auto response = with_retries([&] {
        {
            std::lock_guard lock(mutex_);
            ++stats_.chat_calls;
        }
        return backend_->chat(request);
    });
    response.cached = false;
    if (response.provider_id.empty()) response.provider_id = backend_->id();
    cache_store(key, request, response);
    return response;
}

std::vector<Embedding> LlmGateway::embed(const std::vector<std::string>& texts) {
    if (texts.empty()) throw InputError("embed needs at least one text");
    std::vector<Embedding> out(texts.size());
    std::vector<std::size_t> missing;
    std::vector<std::string> keys(texts.size());
    std::unordered_map<std::string, std::size_t> first_missing;
    std::vector<std::pair<std::size_t, std::size_t>> repeats; // (index, index it copies)
    for (std::size_t i = 0; i < texts.size(); ++i) {
        keys[i] = sha256_hex(backend_->id() + "\x1f" + backend_->model() + "\x1f" + normalize_label(texts[i]));
        if (const auto it = first_missing.find(keys[i]); it != first_missing.end()) {
            repeats.emplace_back(i, it->second);
            continue;
        }
        {
            std::lock_guard lock(mutex_);
            if (const auto it = embed_cache_.find(keys[i]); it != embed_cache_.end()) {
                out[i] = it->second;
                ++stats_.embed_cache_hits;
                continue;
            }
        }
        if (!cache_dir_.empty()) {
            const auto path = cache_dir_ / "embeddings" / (keys[i] + ".json");
            if (std::filesystem::exists(path)) {
                try {
                    out[i] = json::parse(read_file(path)).at("embedding").get<Embedding>();
                    std::lock_guard lock(mutex_);
                    embed_cache_.emplace(keys[i], out[i]);
                    ++stats_.embed_cache_hits;
                    continue;
                } catch (const std::exception&) {
                    // fall through to a fresh call
                }
            }
        }
        first_missing.emplace(keys[i], i);
        missing.push_back(i);
    }

    for (std::size_t start = 0; start < missing.size(); start += embed_batch_) {
        const auto end = std::min(missing.size(), start + embed_batch_);
        std::vector<std::string> batch;
        for (auto k = start; k < end; ++k) batch.push_back(texts[missing[k]]);
        auto vectors = with_retries([&] {
            {
                std::lock_guard lock(mutex_);
                ++stats_.embed_calls;
            }
            return backend_->embed(batch);
        });
        if (vectors.size() != batch.size()) throw ProviderError("embedding batch size mismatch");
        for (auto k = start; k < end; ++k) {
            const auto i = missing[k];
            out[i] = std::move(vectors[k - start]);
            {
                std::lock_guard lock(mutex_);
                embed_cache_.emplace(keys[i], out[i]);
            }
            if (!cache_dir_.empty()) {
                ordered_json entry{{"text", texts[i]}, {"embedding", out[i]}};
                write_file_atomic(cache_dir_ / "embeddings" / (keys[i] + ".json"), entry.dump());
            }
        }
    }

    for (const auto& [index, source] : repeats) {
        out[index] = out[source];
        std::lock_guard lock(mutex_);
        ++stats_.embed_cache_hits;
    }

    const auto dim = out.front().size();
    for (const auto& v : out) {
        if (v.size() != dim) throw ProviderError("embedding provider returned vectors of unequal dimension");
    }
    return out;
}

} // namespace kgcot
