#pragma once
// Chat and embedding access behind one gateway: content-hash disk cache,
// bounded retries with exponential backoff, and a process-wide cap on
// in-flight provider calls. Backends are either an OpenAI-compatible HTTP
// endpoint or a scripted mock driven by a scenario file.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgcot/common.hpp"

namespace kgcot {

enum class Role { system, user, assistant };

const char* to_string(Role role);
Role role_from_string(const std::string& text);

struct ChatMessage {
    Role role = Role::user;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output = 1024;
    std::string tag; // pipeline stage, for audit and mock routing
};

struct TokenScore {
    std::string token;
    double logprob = 0.0;
};

struct ChatResponse {
    std::string text;
    std::optional<std::vector<TokenScore>> token_scores;
    std::string provider_id;
    bool cached = false;
};

using Embedding = std::vector<double>;

// Retryable failure: transport errors, HTTP 429 and 5xx.
class TransientProviderError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

// A raw provider. Implementations must be safe to call concurrently.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string id() const = 0;
    virtual std::string model() const = 0;
    virtual ChatResponse chat(const ChatRequest& request) = 0;
    virtual std::vector<Embedding> embed(const std::vector<std::string>& texts) = 0;
};

struct ProviderConfig {
    enum class Kind { http_openai_compatible, mock };

    Kind kind = Kind::mock;
    std::string base_url;
    std::string model = "gpt-4o";
    std::string embedding_model = "text-embedding-3-small";
    std::string api_key_env = "KGCOT_API_KEY";
    std::filesystem::path scenario;
    std::size_t max_in_flight = 4;
    int retries = 3; // total attempts per call
    int backoff_ms = 500;
    int timeout_s = 120;
    std::size_t embed_batch = 64;
    bool request_logprobs = false;
    std::filesystem::path cache_dir;

    // Throws InputError when the config cannot produce a backend.
    void validate() const;
};

class OpenAiCompatibleBackend final : public ChatBackend {
public:
    OpenAiCompatibleBackend(std::string base_url, std::string api_key, std::string model,
                            std::string embedding_model, int timeout_s, bool request_logprobs);

    std::string id() const override { return "openai-compatible:" + base_url_; }
    std::string model() const override { return model_; }
    ChatResponse chat(const ChatRequest& request) override;
    std::vector<Embedding> embed(const std::vector<std::string>& texts) override;

private:
    std::string post(const std::string& path, const std::string& body);

    std::string base_url_;
    std::string origin_;
    std::string path_prefix_;
    std::string api_key_;
    std::string model_;
    std::string embedding_model_;
    int timeout_s_;
    bool request_logprobs_;
};

// Scripted provider: chat replies come from (tag, contains) rules, first
// match wins; embeddings are seeded hashes of the normalized text.
class MockBackend final : public ChatBackend {
public:
    struct Rule {
        std::optional<std::string> tag;
        std::vector<std::string> contains; // all must occur
        std::string reply;
        std::optional<std::vector<TokenScore>> token_scores;
        bool fail = false;
    };

    static std::shared_ptr<MockBackend> from_scenario(const std::filesystem::path& scenario);
    static std::shared_ptr<MockBackend> from_json(const std::string& scenario_text);

    std::string id() const override { return id_; }
    std::string model() const override { return "scenario"; }
    ChatResponse chat(const ChatRequest& request) override;
    std::vector<Embedding> embed(const std::vector<std::string>& texts) override;

    std::size_t embedding_dim() const { return dim_; }
    Embedding embed_one(const std::string& text) const;

private:
    Embedding hashed(const std::string& normalized) const;

    std::string id_;
    std::size_t dim_ = 16;
    std::uint64_t seed_ = 0;
    std::vector<Rule> rules_;
    std::optional<std::string> default_reply_;
    std::map<std::string, std::map<std::string, double>> aliases_;
    std::map<std::string, Embedding> overrides_;
};

std::shared_ptr<ChatBackend> make_backend(const ProviderConfig& config);

struct GatewayStats {
    std::size_t chat_calls = 0;      // requests that reached the backend
    std::size_t chat_cache_hits = 0;
    std::size_t embed_calls = 0;     // backend batches
    std::size_t embed_cache_hits = 0; // texts served from cache
    std::size_t retries = 0;
};

class LlmGateway {
public:
    LlmGateway(std::shared_ptr<ChatBackend> backend, const ProviderConfig& config);

    ChatResponse chat(const ChatRequest& request);
    std::vector<Embedding> embed(const std::vector<std::string>& texts);

    std::string provider_id() const { return backend_->id(); }
    std::string model() const { return backend_->model(); }
    std::size_t max_in_flight() const { return max_in_flight_; }
    GatewayStats stats() const;

    static std::string cache_key(const std::string& provider_id, const std::string& model,
                                 const ChatRequest& request);

private:
    template <typename Fn>
    auto with_retries(Fn&& fn) -> decltype(fn());

    std::optional<ChatResponse> cache_lookup(const std::string& key);
    void cache_store(const std::string& key, const ChatRequest& request, const ChatResponse& response);

    std::shared_ptr<ChatBackend> backend_;
    std::size_t max_in_flight_;
    int attempts_;
    int backoff_ms_;
    std::size_t embed_batch_;
    std::filesystem::path cache_dir_;
    std::counting_semaphore<4096> in_flight_;

    mutable std::mutex mutex_;
    std::unordered_map<std::string, ChatResponse> chat_cache_;
    std::unordered_map<std::string, Embedding> embed_cache_;
    GatewayStats stats_;
};

} // namespace kgcot
