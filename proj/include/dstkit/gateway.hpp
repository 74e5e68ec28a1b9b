#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dstkit/corpus.hpp"
#include "dstkit/errors.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/prompt.hpp"

namespace dstkit {

class AuthError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

class RateLimitError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

class NetworkError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

struct RetryPolicy {
    int max_attempts = 5;
    double backoff_base_s = 1.0;  // wait base * 2^(k-1) before retry k
    double max_backoff_s = 60.0;
};

struct GatewayConfig {
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string model = "gpt-3.5-turbo";
    int max_in_flight = 4;
    double requests_per_minute = 60.0;
    RetryPolicy retry;
    std::string cache_dir = ".dstkit-cache";
    std::string api_key_env = "DSTKIT_API_KEY";  // empty: send no credentials
    double temperature = 0.0;
    double timeout_s = 60.0;
    bool offline = false;  // serve from cache only

    void validate() const;
};

struct CompletionRecord {
    std::string prompt;
    std::string response;
    std::string model;
    double temperature = 0.0;
    std::string timestamp;  // UTC, ISO 8601
    std::optional<long> prompt_tokens;
    std::optional<long> completion_tokens;
    int attempts = 0;
    bool from_cache = false;
};

// Hex SHA-256 of model, prompt and decoding parameters.
std::string cache_key(std::string_view model, std::string_view prompt, double temperature);

/// One JSON file per record plus an append-only index.tsv. Writes go
/// through a single mutex.
class ResponseCache {
public:
    explicit ResponseCache(std::string dir);

    std::optional<CompletionRecord> get(const std::string& key) const;
    void put(const std::string& key, const CompletionRecord& record);
    const std::string& dir() const noexcept { return dir_; }

private:
    std::string dir_;
    mutable std::mutex write_mutex_;
};

std::string record_to_json(const CompletionRecord& record);
CompletionRecord record_from_json(std::string_view text);

struct GatewayStats {
    long network_requests = 0;
    long cache_hits = 0;
    long retries = 0;
};

using GatewayLog = std::function<void(const std::string&)>;

/// Chat-completion client with a response cache, an in-flight cap, a
/// token-bucket rate limit (burst 1) and exponential-backoff retries on
/// 429, 5xx and transport errors. Thread-safe.
class Gateway {
public:
    explicit Gateway(GatewayConfig config, GatewayLog log = {});

    CompletionRecord complete(const std::string& prompt);

    struct Outcome {
        std::optional<CompletionRecord> record;
        std::string error;  // set when record is empty
    };
    // Runs prompts on a pool of max_in_flight workers; results in input order.
    std::vector<Outcome> complete_all(std::span<const std::string> prompts);

    GatewayStats stats() const;
    const GatewayConfig& config() const noexcept { return config_; }

private:
    GatewayConfig config_;
    GatewayLog log_;
    ResponseCache cache_;
    std::string scheme_host_port_;
    std::string path_;

    mutable std::mutex mutex_;
    std::condition_variable slot_free_;
    int in_flight_ = 0;
    std::chrono::steady_clock::time_point next_send_;
    std::atomic<long> network_requests_{0};
    std::atomic<long> cache_hits_{0};
    std::atomic<long> retries_{0};

    std::string api_key() const;
    void acquire();
    void release();
    CompletionRecord send(const std::string& prompt, const std::string& key);
};

// ---- response parsing -------------------------------------------------------

struct ParsedValue {
    Value value;
    bool valid = true;
};

// Strips quotes, trailing punctuation and boilerplate such as "The value is";
// "none" / "not mentioned" map to NONE. Empty input is NONE, invalid.
ParsedValue parse_single_return(std::string_view response);

struct ParsedState {
    DialogueState state;
    bool valid = true;
    Warnings warnings;
};

// Accepts a JSON object (double or single quotes) or "Slot: value, ..."
// pairs. Slot ids match case-insensitively; unknown ids are dropped with a
// warning. An unparseable response yields an all-NONE invalid state.
ParsedState parse_multi_return(std::string_view response, const Schema& schema);

// ---- corpus driver ----------------------------------------------------------

struct QueryStats {
    long prompts = 0;
    long failed = 0;
    long invalid = 0;
};

// Queries every turn (x slot in single modes) of `corpus` and parses the
// responses into predictions. Failed requests score as missing.
PredictionSet query_corpus(Gateway& gateway, std::span<const Dialogue> corpus, const Schema& schema,
                           const TemplateSet& templates, RemoteMode mode,
                           Warnings* warnings = nullptr, QueryStats* stats = nullptr);

}  // namespace dstkit
