#include <httplib.h>

#include "dstkit/gateway.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void GatewayConfig::validate() const {
    if (endpoint.empty()) throw UsageError("gateway endpoint is empty");
    if (model.empty()) throw UsageError("gateway model is empty");
    if (max_in_flight < 1) throw UsageError("max in-flight requests must be >= 1");
    if (!(requests_per_minute > 0.0)) throw UsageError("requests per minute must be > 0");
    if (retry.max_attempts < 1) throw UsageError("retry attempts must be >= 1");
    if (!(retry.backoff_base_s >= 0.0)) throw UsageError("backoff base must be >= 0");
    if (!(timeout_s > 0.0)) throw UsageError("timeout must be > 0");
}

std::string cache_key(std::string_view model, std::string_view prompt, double temperature) {
    std::string material(model);
    material += '\0';
    material += prompt;
    material += '\0';
    char t[64];
    std::snprintf(t, sizeof(t), "temperature=%.6g", temperature);
    material += t;
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(material.data(), material.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw RuntimeFailure("SHA-256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string record_to_json(const CompletionRecord& r) {
    ordered_json doc;
    doc["model"] = r.model;
    doc["temperature"] = r.temperature;
    doc["timestamp"] = r.timestamp;
    doc["prompt"] = r.prompt;
    doc["response"] = r.response;
    doc["prompt_tokens"] = r.prompt_tokens ? ordered_json(*r.prompt_tokens) : ordered_json(nullptr);
    doc["completion_tokens"] =
        r.completion_tokens ? ordered_json(*r.completion_tokens) : ordered_json(nullptr);
    doc["attempts"] = r.attempts;
    return doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

CompletionRecord record_from_json(std::string_view text) {
    CompletionRecord r;
    try {
        const json doc = json::parse(text);
        r.model = doc.at("model").get<std::string>();
        r.temperature = doc.value("temperature", 0.0);
        r.timestamp = doc.value("timestamp", "");
        r.prompt = doc.at("prompt").get<std::string>();
        r.response = doc.at("response").get<std::string>();
        if (doc.contains("prompt_tokens") && !doc["prompt_tokens"].is_null()) {
            r.prompt_tokens = doc["prompt_tokens"].get<long>();
        }
        if (doc.contains("completion_tokens") && !doc["completion_tokens"].is_null()) {
            r.completion_tokens = doc["completion_tokens"].get<long>();
        }
        r.attempts = doc.value("attempts", 0);
    } catch (const json::exception& e) {
        throw DataError(std::string("bad cache record: ") + e.what());
    }
    return r;
}

ResponseCache::ResponseCache(std::string dir) : dir_(std::move(dir)) {}

std::optional<CompletionRecord> ResponseCache::get(const std::string& key) const {
    const fs::path p = fs::path(dir_) / (key + ".json");
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CompletionRecord r = record_from_json(text);
    r.from_cache = true;
    return r;
}

void ResponseCache::put(const std::string& key, const CompletionRecord& record) {
    std::lock_guard lock(write_mutex_);
    std::error_code ec;
    fs::create_directories(dir_, ec);
    const fs::path final_path = fs::path(dir_) / (key + ".json");
    const fs::path tmp = fs::path(dir_) / (key + ".json.tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeFailure("cannot write cache file " + tmp.string());
        out << record_to_json(record);
    }
    fs::rename(tmp, final_path, ec);
    if (ec) throw RuntimeFailure("cannot write cache file " + final_path.string() + ": " + ec.message());
    std::ofstream index(fs::path(dir_) / "index.tsv", std::ios::app);
    index << key << '\t' << record.timestamp << '\t' << record.model << '\n';
}

namespace {

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

Gateway::Gateway(GatewayConfig config, GatewayLog log)
    : config_(std::move(config)), log_(std::move(log)), cache_(config_.cache_dir),
      next_send_(std::chrono::steady_clock::now()) {
    config_.validate();
    const std::string& url = config_.endpoint;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw UsageError("endpoint must be an http(s) URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
}

std::string Gateway::api_key() const {
    if (config_.api_key_env.empty()) return {};
    const char* v = std::getenv(config_.api_key_env.c_str());
    if (v == nullptr || *v == '\0') {
        throw AuthError("credentials missing: environment variable " + config_.api_key_env +
                        " is not set");
    }
    return v;
}

void Gateway::acquire() {
    std::unique_lock lock(mutex_);
    slot_free_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
    ++in_flight_;
    const auto interval = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(60.0 / config_.requests_per_minute));
    const auto now = std::chrono::steady_clock::now();
    const auto send_at = std::max(now, next_send_);
    next_send_ = send_at + interval;
    lock.unlock();
    std::this_thread::sleep_until(send_at);
}

void Gateway::release() {
    {
        std::lock_guard lock(mutex_);
        --in_flight_;
    }
    slot_free_.notify_one();
}

CompletionRecord Gateway::send(const std::string& prompt, const std::string& key) {
    const std::string token = api_key();
    ordered_json body;
    body["model"] = config_.model;
    body["messages"] = ordered_json::array({{{"role", "user"}, {"content", prompt}}});
    body["temperature"] = config_.temperature;
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);

    std::string last_error;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
        if (attempt > 1) {
            const double wait = std::min(config_.retry.max_backoff_s,
                                         config_.retry.backoff_base_s * std::pow(2.0, attempt - 2));
            ++retries_;
            if (log_) log_("retry " + std::to_string(attempt - 1) + " after " + last_error);
            std::this_thread::sleep_for(std::chrono::duration<double>(wait));
        }
        acquire();
        httplib::Result res{nullptr, httplib::Error::Unknown};
        {
            httplib::Client client(scheme_host_port_);
            const auto secs = static_cast<time_t>(config_.timeout_s);
            client.set_connection_timeout(secs, 0);
            client.set_read_timeout(secs, 0);
            client.set_write_timeout(secs, 0);
            ++network_requests_;
            res = client.Post(path_, headers, payload, "application/json");
        }
        release();
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        const int status = res->status;
        if (status == 401 || status == 403) {
            throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(status) + ")");
        }
        if (status == 429) {
            last_error = "HTTP 429";
            if (attempt == config_.retry.max_attempts) {
                throw RateLimitError("rate limited after " + std::to_string(attempt) + " attempts");
            }
            continue;
        }
        if (status >= 500) {
            last_error = "HTTP " + std::to_string(status);
            continue;
        }
        if (status != 200) {
            throw RuntimeFailure("endpoint returned HTTP " + std::to_string(status) + ": " +
                                 res->body.substr(0, 200));
        }
        CompletionRecord rec;
        try {
            const json doc = json::parse(res->body);
            rec.response = doc.at("choices").at(0).at("message").at("content").get<std::string>();
            if (doc.contains("usage")) {
                const json& u = doc["usage"];
                if (u.contains("prompt_tokens")) rec.prompt_tokens = u["prompt_tokens"].get<long>();
                if (u.contains("completion_tokens")) {
                    rec.completion_tokens = u["completion_tokens"].get<long>();
                }
            }
        } catch (const json::exception& e) {
            throw RuntimeFailure(std::string("malformed completion response: ") + e.what());
        }
        rec.prompt = prompt;
        rec.model = config_.model;
        rec.temperature = config_.temperature;
        rec.timestamp = utc_now();
        rec.attempts = attempt;
        if (log_) log_("completed " + key.substr(0, 12) + " in " + std::to_string(attempt) + " attempt(s)");
        return rec;
    }
    throw NetworkError("request failed after " + std::to_string(config_.retry.max_attempts) +
                       " attempts: " + last_error);
}

CompletionRecord Gateway::complete(const std::string& prompt) {
    const std::string key = cache_key(config_.model, prompt, config_.temperature);
    if (auto hit = cache_.get(key)) {
        ++cache_hits_;
        return *hit;
    }
    if (config_.offline) {
        throw RuntimeFailure("offline mode: no cached response for key " + key);
    }
    CompletionRecord rec = send(prompt, key);
    cache_.put(key, rec);
    return rec;
}

std::vector<Gateway::Outcome> Gateway::complete_all(std::span<const std::string> prompts) {
    std::vector<Outcome> out(prompts.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> auth_failed{false};
    std::string auth_message;
    std::mutex auth_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            if (auth_failed) {
                out[i].error = "skipped after authentication failure";
                continue;
            }
            try {
                out[i].record = complete(prompts[i]);
            } catch (const AuthError& e) {
                auth_failed = true;
                std::lock_guard lock(auth_mutex);
                auth_message = e.what();
                out[i].error = e.what();
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(config_.max_in_flight),
                                             std::max<std::size_t>(1, prompts.size()));
        for (std::size_t w = 0; w < n; ++w) pool.emplace_back(work);
    }
    if (auth_failed) throw AuthError(auth_message);
    return out;
}

GatewayStats Gateway::stats() const {
    return {network_requests_.load(), cache_hits_.load(), retries_.load()};
}

// ---- parsing --------------------------------------------------------------------

namespace {

bool is_quote(char c) { return c == '"' || c == '\'' || c == '`'; }

std::string strip_wrapping(std::string_view s) {
    std::string_view v = trim(s);
    bool changed = true;
    while (changed && !v.empty()) {
        changed = false;
        while (!v.empty() && std::string_view(".,;:!").find(v.back()) != std::string_view::npos) {
            v.remove_suffix(1);
            v = trim(v);
            changed = true;
        }
        if (v.size() >= 2 && is_quote(v.front()) && v.back() == v.front()) {
            v = trim(v.substr(1, v.size() - 2));
            changed = true;
        } else if (!v.empty() && is_quote(v.front()) &&
                   v.find(v.front(), 1) == std::string_view::npos) {
            v = trim(v.substr(1));
            changed = true;
        } else if (!v.empty() && is_quote(v.back()) &&
                   v.substr(0, v.size() - 1).find(v.back()) == std::string_view::npos) {
            v = trim(v.substr(0, v.size() - 1));
            changed = true;
        }
    }
    return std::string(v);
}

// Removes a leading "... is" boilerplate phrase.
std::string strip_boilerplate(std::string text) {
    static const std::vector<std::string> prefixes = {
        "so the value of slot", "the value of slot", "the value of the slot", "the value of",
        "the value is", "the answer is", "answer:", "value:", "output:", "result:"};
    bool changed = true;
    while (changed) {
        changed = false;
        const std::string lower = to_lower(text);
        for (const std::string& p : prefixes) {
            if (lower.rfind(p, 0) != 0) continue;
            std::string rest = std::string(trim(std::string_view(text).substr(p.size())));
            if (p.back() != ':' && p.find(" is") == std::string::npos) {
                // "the value of slot <x> is" style: drop through the first " is "
                const std::string rl = to_lower(rest);
                const auto pos = rl.find(" is");
                if (pos == std::string::npos) continue;
                rest = std::string(trim(std::string_view(rest).substr(pos + 3)));
            }
            text = strip_wrapping(rest);
            changed = true;
            break;
        }
    }
    return text;
}

}  // namespace

ParsedValue parse_single_return(std::string_view response) {
    ParsedValue out;
    std::string_view body = trim(response);
    if (body.empty()) {
        out.valid = false;
        return out;
    }
    // first non-empty line carries the answer
    const auto nl = body.find('\n');
    if (nl != std::string_view::npos) body = trim(body.substr(0, nl));
    std::string text = strip_boilerplate(strip_wrapping(body));
    const std::string lower = to_lower(text);
    if (lower.empty()) {
        out.valid = false;
        return out;
    }
    if (lower.find("not mentioned") != std::string::npos) return out;
    if (lower.rfind("none", 0) == 0 &&
        (lower.size() == 4 || std::isalnum(static_cast<unsigned char>(lower[4])) == 0)) {
        return out;
    }
    out.value = canonical_value(text);
    return out;
}

namespace {

bool assign_pair(const Schema& schema, std::string key, const std::string& raw, ParsedState& st) {
    key = to_lower(strip_wrapping(key));
    const auto idx = schema.index_of(key);
    if (!idx) {
        st.warnings.push_back("unknown slot id in response: " + key);
        return false;
    }
    ParsedValue v = parse_single_return(raw);
    st.state.values[*idx] = v.value;
    return true;
}

bool parse_json_object(std::string_view text, const Schema& schema, ParsedState& st) {
    const auto open = text.find('{');
    const auto close = text.rfind('}');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) return false;
    std::string obj(text.substr(open, close - open + 1));
    json doc;
    try {
        doc = json::parse(obj);
    } catch (const json::exception&) {
        std::replace(obj.begin(), obj.end(), '\'', '"');
        try {
            doc = json::parse(obj);
        } catch (const json::exception&) {
            return false;
        }
    }
    if (!doc.is_object()) return false;
    for (const auto& [k, v] : doc.items()) {
        std::string raw;
        if (v.is_string()) {
            raw = v.get<std::string>();
        } else if (v.is_array() && !v.empty() && v[0].is_string()) {
            raw = v[0].get<std::string>();
        } else if (v.is_null()) {
            raw = "none";
        } else {
            raw = v.dump();
        }
        assign_pair(schema, k, raw, st);
    }
    return true;
}

}  // namespace

ParsedState parse_multi_return(std::string_view response, const Schema& schema) {
    ParsedState st;
    st.state = DialogueState::empty(schema);
    const std::string_view text = trim(response);
    if (text.empty()) {
        st.valid = false;
        return st;
    }
    if (parse_json_object(text, schema, st)) return st;
    const std::string lower = to_lower(text);
    if (lower == "none" || lower == "none." || lower == "{}") return st;

    std::string flat(text);
    std::replace(flat.begin(), flat.end(), '\n', ',');
    std::size_t pairs = 0;
    for (const std::string& part : split(flat, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) continue;
        std::string key(trim(std::string_view(part).substr(0, colon)));
        if (key.find('-') == std::string::npos) continue;
        ++pairs;
        assign_pair(schema, key, part.substr(colon + 1), st);
    }
    if (pairs == 0) {
        st.valid = false;
        st.warnings.push_back("unparseable multi-slot response");
    }
    return st;
}

PredictionSet query_corpus(Gateway& gateway, std::span<const Dialogue> corpus, const Schema& schema,
                           const TemplateSet& templates, RemoteMode mode, Warnings* warnings,
                           QueryStats* stats) {
    struct Job {
        std::size_t dialogue;
        std::size_t turn;
        std::optional<std::size_t> slot;
    };
    const DemoExemplar demo = DemoExemplar::from_templates(templates);
    const DemoExemplar* demo_ptr = uses_demo(mode) ? &demo : nullptr;
    std::vector<Job> jobs;
    std::vector<std::string> prompts;
    for (std::size_t di = 0; di < corpus.size(); ++di) {
        const Dialogue& d = corpus[di];
        for (std::size_t t = 1; t <= d.num_turns(); ++t) {
            const std::string ctx = render_context(std::span<const Turn>(d.turns.data(), t), templates);
            if (is_single(mode)) {
                for (std::size_t j = 0; j < schema.size(); ++j) {
                    jobs.push_back({di, t, j});
                    prompts.push_back(remote_prompt(mode, ctx, std::span<const SlotSpec>(&schema[j], 1),
                                                    templates, demo_ptr));
                }
            } else {
                jobs.push_back({di, t, std::nullopt});
                prompts.push_back(remote_prompt(mode, ctx, schema.slots(), templates, demo_ptr));
            }
        }
    }
    const auto outcomes = gateway.complete_all(prompts);
    PredictionSet preds;
    preds.provenance = gateway.config().model + "/" + to_string(mode);
    QueryStats qs;
    qs.prompts = static_cast<long>(prompts.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const Job& job = jobs[i];
        const Dialogue& d = corpus[job.dialogue];
        if (!outcomes[i].record) {
            ++qs.failed;
            if (warnings != nullptr) {
                warnings->push_back(d.id + " turn " + std::to_string(job.turn) + ": " + outcomes[i].error);
            }
            continue;
        }
        const std::string& text = outcomes[i].record->response;
        if (job.slot) {
            const ParsedValue v = parse_single_return(text);
            if (!v.valid) ++qs.invalid;
            preds.set(d.id, job.turn, schema[*job.slot].id(), v.value);
        } else {
            ParsedState st = parse_multi_return(text, schema);
            if (!st.valid) ++qs.invalid;
            if (warnings != nullptr) {
                for (auto& w : st.warnings) warnings->push_back(d.id + " turn " + std::to_string(job.turn) + ": " + w);
            }
            for (std::size_t j = 0; j < schema.size(); ++j) preds.set(d.id, job.turn, schema[j].id(), st.state.at(j));
        }
    }
    if (stats != nullptr) *stats = qs;
    return preds;
}

}  // namespace dstkit
