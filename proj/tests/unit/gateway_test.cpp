#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "dstkit/gateway.hpp"

using namespace dstkit;
namespace fs = std::filesystem;

namespace {

Schema train_schema() {
    return load_schema(R"([{"service_name": "train", "description": "rail", "slots": [
        {"name": "departure", "description": "from", "is_categorical": false},
        {"name": "arrival", "description": "to", "is_categorical": false},
        {"name": "day", "description": "day", "is_categorical": false}]}])");
}

std::string completion_body(const std::string& content) {
    nlohmann::json doc;
    doc["choices"] = nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}});
    doc["usage"] = {{"prompt_tokens", 12}, {"completion_tokens", 3}};
    return doc.dump();
}

// Local chat-completion stub. Answers with the last word of the prompt.
class Stub {
public:
    std::atomic<int> hits{0};
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};
    std::atomic<int> fail_first{0};  // answer 429 to this many requests first
    std::atomic<int> status_override{0};
    int delay_ms = 0;
    std::vector<double> arrivals;
    std::mutex arrivals_mutex;

    Stub() {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const int now = ++in_flight;
            int seen = peak.load();
            while (now > seen && !peak.compare_exchange_weak(seen, now)) {
            }
            {
                std::lock_guard lock(arrivals_mutex);
                arrivals.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count());
            }
            ++hits;
            if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            --in_flight;
            if (status_override != 0) {
                res.status = status_override;
                return;
            }
            if (fail_first > 0) {
                --fail_first;
                res.status = 429;
                return;
            }
            const auto doc = nlohmann::json::parse(req.body);
            const std::string prompt = doc["messages"][0]["content"];
            res.set_content(completion_body(prompt.substr(prompt.rfind(' ') + 1)), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~Stub() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

GatewayConfig stub_config(const Stub& stub, const std::string& cache) {
    GatewayConfig c;
    c.endpoint = stub.endpoint();
    c.model = "stub-model";
    c.cache_dir = cache;
    c.api_key_env = "";
    c.requests_per_minute = 60000.0;
    c.retry.backoff_base_s = 0.01;
    c.timeout_s = 5;
    return c;
}

std::string fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dstkit_gw_" + name);
    fs::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("single-return parser") {
    CHECK(parse_single_return("centre").value == Value::literal("centre"));
    CHECK(parse_single_return("NONE").value.is_none());
    CHECK(parse_single_return("NONE.").value.is_none());
    CHECK(parse_single_return("The value is 14:00.").value == Value::literal("14:00"));
    CHECK(parse_single_return("\"north\"").value == Value::literal("north"));
    CHECK(parse_single_return("not mentioned").value.is_none());
    CHECK(parse_single_return("So the value of slot <hotel-area> is east.").value == Value::literal("east"));
    CHECK(parse_single_return("dontcare").value.kind == Value::Kind::dontcare);
    CHECK(parse_single_return("cheap\nBecause the user said so.").value == Value::literal("cheap"));
    const ParsedValue empty = parse_single_return("   ");
    CHECK(empty.value.is_none());
    CHECK_FALSE(empty.valid);
}

TEST_CASE("multi-return parser") {
    const Schema s = train_schema();
    const ParsedState pairs = parse_multi_return("Train-Departure: Norwich, Train-Arrival: Cambridge", s);
    CHECK(pairs.valid);
    CHECK(pairs.state.get(s, "train-departure") == Value::literal("Norwich"));
    CHECK(pairs.state.get(s, "train-arrival") == Value::literal("Cambridge"));
    CHECK(pairs.state.get(s, "train-day").is_none());

    const ParsedState empty = parse_multi_return("{}", s);
    CHECK(empty.valid);
    CHECK(empty.state == DialogueState::empty(s));

    const ParsedState unknown =
        parse_multi_return("{'train-departure': 'ely', 'train-fuel': 'diesel', 'train-day': 'monday'}", s);
    CHECK(unknown.valid);
    CHECK(unknown.warnings.size() == 1);
    CHECK(unknown.state.get(s, "train-departure") == Value::literal("ely"));
    CHECK(unknown.state.get(s, "train-day") == Value::literal("monday"));

    const ParsedState junk = parse_multi_return("I cannot help with that", s);
    CHECK_FALSE(junk.valid);
    CHECK(junk.state == DialogueState::empty(s));
}

TEST_CASE("cache keys depend on model, prompt and temperature") {
    const std::string k = cache_key("m", "p", 0.0);
    CHECK(k.size() == 64);
    CHECK(k == cache_key("m", "p", 0.0));
    CHECK(k != cache_key("m2", "p", 0.0));
    CHECK(k != cache_key("m", "p2", 0.0));
    CHECK(k != cache_key("m", "p", 0.7));
}

TEST_CASE("cache records round trip without secrets") {
    CompletionRecord r;
    r.prompt = "hello";
    r.response = "world";
    r.model = "m";
    r.timestamp = "2024-01-01T00:00:00Z";
    r.prompt_tokens = 4;
    r.attempts = 2;
    const CompletionRecord back = record_from_json(record_to_json(r));
    CHECK(back.prompt == r.prompt);
    CHECK(back.response == r.response);
    CHECK(back.prompt_tokens == r.prompt_tokens);
    CHECK_FALSE(back.completion_tokens.has_value());
    CHECK(record_to_json(r).find("Bearer") == std::string::npos);
}

TEST_CASE("config validation") {
    GatewayConfig c;
    CHECK_NOTHROW(c.validate());
    c.max_in_flight = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = {};
    c.requests_per_minute = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("missing credentials fail before any request") {
    Stub stub;
    GatewayConfig c = stub_config(stub, fresh_dir("auth"));
    c.api_key_env = "DSTKIT_TEST_KEY_THAT_IS_NOT_SET";
    ::unsetenv(c.api_key_env.c_str());
    Gateway gw(c);
    CHECK_THROWS_AS(gw.complete("hi there"), AuthError);
    CHECK(stub.hits == 0);
}

TEST_CASE("rejected credentials surface as authentication errors") {
    Stub stub;
    stub.status_override = 401;
    Gateway gw(stub_config(stub, fresh_dir("reject")));
    CHECK_THROWS_AS(gw.complete("x y"), AuthError);
    CHECK(stub.hits == 1);
}

TEST_CASE("429 responses are retried with backoff") {
    Stub stub;
    stub.fail_first = 2;
    Gateway gw(stub_config(stub, fresh_dir("retry")));
    const CompletionRecord r = gw.complete("value please north");
    CHECK(r.response == "north");
    CHECK(r.attempts == 3);
    CHECK(stub.hits == 3);
    CHECK(gw.stats().retries == 2);
}

TEST_CASE("rate limiting that never clears is reported") {
    Stub stub;
    stub.status_override = 429;
    GatewayConfig c = stub_config(stub, fresh_dir("ratelimit"));
    c.retry.max_attempts = 3;
    Gateway gw(c);
    CHECK_THROWS_AS(gw.complete("a b"), RateLimitError);
    CHECK(stub.hits == 3);
}

TEST_CASE("server errors exhaust retries as network errors") {
    Stub stub;
    stub.status_override = 503;
    GatewayConfig c = stub_config(stub, fresh_dir("5xx"));
    c.retry.max_attempts = 2;
    Gateway gw(c);
    CHECK_THROWS_AS(gw.complete("a b"), NetworkError);
}

TEST_CASE("second identical call is served from cache") {
    Stub stub;
    const std::string dir = fresh_dir("cache");
    {
        Gateway gw(stub_config(stub, dir));
        CHECK(gw.complete("say south").response == "south");
        CHECK(gw.complete("say south").from_cache);
        CHECK(gw.stats().network_requests == 1);
        CHECK(gw.stats().cache_hits == 1);
    }
    GatewayConfig offline = stub_config(stub, dir);
    offline.offline = true;
    Gateway replay(offline);
    CHECK(replay.complete("say south").response == "south");
    CHECK_THROWS_AS(replay.complete("say west"), RuntimeFailure);
    CHECK(stub.hits == 1);
    CHECK(fs::exists(fs::path(dir) / "index.tsv"));
}

TEST_CASE("concurrency cap and request rate") {
    Stub stub;
    stub.delay_ms = 40;
    GatewayConfig c = stub_config(stub, fresh_dir("cap"));
    c.max_in_flight = 3;
    c.requests_per_minute = 600.0;
    Gateway gw(c);
    std::vector<std::string> prompts;
    for (int i = 0; i < 12; ++i) prompts.push_back("prompt number " + std::to_string(i));
    const auto out = gw.complete_all(prompts);
    for (std::size_t i = 0; i < out.size(); ++i) {
        REQUIRE(out[i].record.has_value());
        CHECK(out[i].record->response == std::to_string(i));
    }
    CHECK(stub.peak <= 3);
    std::sort(stub.arrivals.begin(), stub.arrivals.end());
    // 600 per minute: consecutive sends at least 0.1 s apart
    CHECK(stub.arrivals.back() - stub.arrivals.front() >= 1.1 - 0.02);
}

TEST_CASE("corpus driver in single and multi modes") {
    Stub stub;
    const SynthCorpus c = synth_corpus({3, 2, 2, 2, 0.5}, 5);
    const std::string dir = fresh_dir("driver");
    Gateway gw(stub_config(stub, dir));
    QueryStats qs;
    Warnings w;
    const PredictionSet single =
        query_corpus(gw, c.dialogues, c.schema, TemplateSet::defaults(), RemoteMode::single_no_demo, &w, &qs);
    std::size_t turns = 0;
    for (const auto& d : c.dialogues) turns += d.num_turns();
    CHECK(qs.prompts == static_cast<long>(turns * c.schema.size()));
    CHECK(qs.failed == 0);
    CHECK(single.entries.size() == turns * c.schema.size());
    const PredictionSet multi =
        query_corpus(gw, c.dialogues, c.schema, TemplateSet::defaults(), RemoteMode::multi_one_demo, &w, &qs);
    CHECK(qs.prompts == static_cast<long>(turns));
    CHECK(multi.entries.size() == turns * c.schema.size());
}
