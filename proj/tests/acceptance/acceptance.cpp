// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dstkit/cli.hpp"
#include "dstkit/decoder.hpp"
#include "dstkit/gateway.hpp"
#include "dstkit/keyed_rng.hpp"
#include "dstkit/lora.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/pipeline.hpp"
#include "dstkit/prompt.hpp"
#include "dstkit/strings.hpp"

#include <httplib.h>
#include <json.hpp>

using namespace dstkit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kMergeTol = 1e-10;
constexpr double kGradTol = 1e-4;
constexpr double kCoinLo = 0.47;
constexpr double kCoinHi = 0.53;
constexpr double kDeskJgaMin = 0.80;
constexpr double kDeskSeconds = 600.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 6) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

// ---- 1 ----------------------------------------------------------------------

Outcome parameter_accounting() {
    ToyDecoderConfig big;
    big.vocab_size = 32000;
    big.model_dim = 4096;
    big.n_layers = 32;
    big.n_heads = 32;
    big.context_len = 2048;
    big.lora.rank = 8;
    const ParamCount c = count_trainable(big);
    bool ok = c.trainable == 8388608;
    double lo = 1.0, hi = 0.0;
    for (const std::int64_t base : {6'700'000'000LL, 6'738'415'616LL, 7'000'000'000LL}) {
        const ParamCount p = count_lora_params(32, 4, 8, 4096, 4096, base);
        ok = ok && p.trainable == c.trainable;
        lo = std::min(lo, p.ratio);
        hi = std::max(hi, p.ratio);
    }
    ok = ok && lo >= 0.0011 && hi <= 0.0013;
    return {ok, "trainable=" + std::to_string(c.trainable) + " ratio=[" + fmt(100 * lo, 4) + "%, " +
                    fmt(100 * hi, 4) + "%]"};
}

// ---- 2 ----------------------------------------------------------------------

Outcome instruction_count() {
    json schema = json::array();
    for (int d = 0; d < 7; ++d) {
        json svc = {{"service_name", "domain" + std::to_string(d)}, {"description", "domain"}, {"slots", json::array()}};
        for (int s = 0; s < 7; ++s) {
            const bool categorical = s % 2 == 0;
            json slot = {{"name", "slot" + std::to_string(s)}, {"description", "a slot"}, {"is_categorical", categorical}};
            if (categorical) slot["possible_values"] = {"a", "b", "c"};
            svc["slots"].push_back(slot);
        }
        schema.push_back(svc);
    }
    const Schema sch = load_schema(schema.dump());
    Dialogue d;
    d.id = "six-turns";
    for (int t = 0; t < 6; ++t) {
        d.turns.push_back({t == 0 ? "" : "ok", "turn " + std::to_string(t)});
        d.gold_states.push_back(DialogueState::empty(sch));
    }
    const std::vector<Dialogue> corpus = {d};
    const auto assembled = generate_instruction_dataset(corpus, sch, TemplateSet::defaults(), AssemblyPolicy{});
    const auto fixed = generate_instruction_dataset(corpus, sch, TemplateSet::defaults(), AssemblyPolicy{},
                                                    DatasetMode::fixed);
    const bool ok = sch.size() == 49 && assembled.size() == 294 && fixed.size() == 294;
    return {ok, "slots=" + std::to_string(sch.size()) + " samples=" + std::to_string(assembled.size())};
}

// ---- 3 ----------------------------------------------------------------------

Matrix<double> gaussian_matrix(long rows, long cols, SplitMix64& rng) {
    Matrix<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian();
    return m;
}

Outcome lora_math() {
    SplitMix64 rng(keyed_seed(3, {"acceptance", "lora"}));
    bool zero_exact = true;
    double merge_err = 0.0;
    double grad_err = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const long d = 4 + static_cast<long>(rng.next() % 12);
        const long k = 4 + static_cast<long>(rng.next() % 12);
        const int r = 1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(std::min(d, k) / 2));
        LoraLinear<double> layer;
        layer.W0 = gaussian_matrix(d, k, rng);
        layer.adapter = init_adapter<double>(d, k, r, 2.0 * r, rng.next());
        const Vector<double> x = gaussian_matrix(k, 1, rng);
        const Vector<double> plain = layer.W0 * x;
        zero_exact = zero_exact && (lora_forward(layer, x).array() == plain.array()).all();

        layer.adapter->B = gaussian_matrix(d, r, rng);
        const Vector<double> via_adapter = lora_forward(layer, x);
        const Vector<double> via_merge = merge(layer) * x;
        merge_err = std::max(merge_err, (via_adapter - via_merge).cwiseAbs().maxCoeff());
        if (trial < 20) grad_err = std::max(grad_err, grad_check(layer, x));
    }

    ToyDecoderConfig cfg;
    cfg.model_dim = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.context_len = 32;
    cfg.lora.rank = 2;
    ToyDecoder<double> model(cfg, 5);
    const std::vector<int> tokens = {257, 10, 20, 30, 40, 50};
    const Matrix<double> before = model.logits(tokens);
    model.attach_adapters(6);
    zero_exact = zero_exact && (model.logits(tokens).array() == before.array()).all();

    const bool ok = zero_exact && merge_err <= kMergeTol && grad_err <= kGradTol;
    return {ok, std::string("zero_init_exact=") + (zero_exact ? "yes" : "no") + " merge_max_abs=" + fmt(merge_err, 3) +
                    " grad_rel=" + fmt(grad_err, 3)};
}

// ---- 4 ----------------------------------------------------------------------

enum class Kind { none, dontcare, literal };

struct RawValue {
    Kind kind = Kind::none;
    std::string text;
};

RawValue raw_value(const std::string& s) {
    const std::string t = to_lower(trim(s));
    if (t.empty() || t == "none") return {};
    if (t == "dontcare") return {Kind::dontcare, t};
    return {Kind::literal, t};
}

bool raw_equal(const RawValue& a, const RawValue& b) { return a.kind == b.kind && a.text == b.text; }

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        if (!trim(line).empty()) out.push_back(line);
    }
    return out;
}

Outcome metric_oracle(const std::string& fixtures) {
    const Schema schema = load_schema(read_file(fixtures + "/metric_schema.json"));
    const std::string gold_text = read_file(fixtures + "/metric_gold.jsonl");
    const std::string pred_text = read_file(fixtures + "/metric_predictions.jsonl");
    const auto gold = load_dialogues(gold_text, schema, true);
    const EvalReport r = evaluate(load_predictions(pred_text), gold, schema);

    // Brute force straight from the JSON files.
    std::map<std::tuple<std::string, int, std::string>, RawValue> preds;
    for (const std::string& line : lines_of(pred_text)) {
        const json j = json::parse(line);
        preds[{j["dialogue_id"], j["turn"].get<int>(), j["slot"]}] = raw_value(j["value"]);
    }
    std::vector<std::string> slots;
    for (const auto& svc : json::parse(read_file(fixtures + "/metric_schema.json"))) {
        for (const auto& s : svc["slots"]) {
            slots.push_back(to_lower(svc["service_name"].get<std::string>() + "-" + s["name"].get<std::string>()));
        }
    }
    int turns = 0, joint = 0, active = 0, active_ok = 0;
    std::map<std::string, int> cats;
    std::vector<int> joint_by_turn;
    for (const std::string& line : lines_of(gold_text)) {
        const json d = json::parse(line);
        std::map<std::string, RawValue> previous;
        for (std::size_t t = 0; t < d["states"].size(); ++t) {
            bool all = true;
            for (const std::string& slot : slots) {
                const json& st = d["states"][t];
                const RawValue g = st.contains(slot) ? raw_value(st[slot]) : RawValue{};
                const auto it = preds.find({d["id"], static_cast<int>(t + 1), slot});
                const RawValue p = it == preds.end() ? RawValue{} : it->second;
                const bool match = raw_equal(g, p);
                all = all && match;
                if (g.kind != Kind::none && !raw_equal(g, previous[slot])) {
                    ++active;
                    active_ok += match;
                }
                if (!match) {
                    if ((g.kind == Kind::dontcare && p.kind == Kind::none) ||
                        (g.kind == Kind::none && p.kind == Kind::dontcare)) {
                        ++cats["dontcare_confusion"];
                    } else if (p.kind == Kind::none) {
                        ++cats["missed"];
                    } else if (g.kind == Kind::none) {
                        ++cats["hallucinated"];
                    } else {
                        ++cats["wrong_value"];
                    }
                }
                previous[slot] = g;
            }
            ++turns;
            joint += all;
            if (joint_by_turn.size() <= t) joint_by_turn.resize(t + 1, 0);
            joint_by_turn[t] += all;
        }
    }

    bool ok = r.jga == 2.0 / 3.0 && r.aga && *r.aga == 3.0 / 4.0;
    ok = ok && r.jga == static_cast<double>(joint) / turns && *r.aga == static_cast<double>(active_ok) / active;
    // per-turn decomposition: turn-weighted mean of per-turn JGA is JGA
    double weighted = 0.0;
    std::size_t n = 0;
    for (const TurnJga& tj : r.per_turn_jga) {
        weighted += tj.jga * static_cast<double>(tj.n);
        n += tj.n;
        ok = ok && tj.turn >= 1 && tj.turn <= joint_by_turn.size() &&
             tj.jga * static_cast<double>(tj.n) == joint_by_turn[tj.turn - 1];
    }
    ok = ok && n == r.n_turns && weighted == static_cast<double>(joint);
    bool taxonomy = true;
    for (const ErrorCategory c : kErrorCategories) {
        taxonomy = taxonomy && r.errors.count(c) == static_cast<std::size_t>(cats[to_string(c)]);
    }
    ok = ok && taxonomy;
    return {ok, "jga=" + fmt(r.jga) + " aga=" + (r.aga ? fmt(*r.aga) : "n/a") + " taxonomy " +
                    (taxonomy ? "matches" : "differs") + " brute force"};
}

// ---- 5 ----------------------------------------------------------------------

Outcome coin_fairness() {
    SynthConfig sc{220, 3, 4, 8, 0.5};
    const SynthCorpus corpus = synth_corpus(sc, 55);
    const TemplateSet templates = TemplateSet::defaults();
    double lo = 1.0, hi = 0.0;
    bool pvl_leak = false;
    std::size_t per_seed = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        AssemblyPolicy policy;
        policy.seed = seed;
        auto samples = generate_instruction_dataset(corpus.dialogues, corpus.schema, templates, policy);
        if (samples.size() < 10000) return {false, "corpus yields only " + std::to_string(samples.size()) + " samples"};
        samples.resize(10000);
        per_seed = samples.size();
        std::size_t desc = 0, pvl = 0, categorical = 0;
        for (const InstructionSample& s : samples) {
            desc += s.meta.included_description;
            const bool cat = corpus.schema.slot(s.meta.slot_id).is_categorical;
            if (cat) {
                ++categorical;
                pvl += s.meta.included_pvl;
            } else if (s.meta.included_pvl || s.input.find(templates.seg_pvl) != std::string::npos) {
                pvl_leak = true;
            }
        }
        for (const double rate : {static_cast<double>(desc) / static_cast<double>(samples.size()),
                                  static_cast<double>(pvl) / static_cast<double>(categorical)}) {
            lo = std::min(lo, rate);
            hi = std::max(hi, rate);
        }
    }
    const bool ok = lo >= kCoinLo && hi <= kCoinHi && !pvl_leak;
    return {ok, std::to_string(per_seed) + " samples x 5 seeds, rates in [" + fmt(lo, 4) + ", " + fmt(hi, 4) +
                    "], pvl on non-categorical: " + (pvl_leak ? "yes" : "never")};
}

// ---- 6 ----------------------------------------------------------------------

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), {"dstkit", "--quiet"});
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) std::fprintf(stderr, "dstkit %s failed: %s\n", args[2].c_str(), err.str().c_str());
    return code;
}

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().filename().string().find("manifest") != std::string::npos) continue;
        files[fs::relative(e.path(), dir).string()] = read_file(e.path().string());
    }
    return files;
}

Outcome determinism(const fs::path& work) {
    std::vector<std::map<std::string, std::string>> runs;
    const std::vector<std::pair<std::string, std::string>> plan = {{"a", "1"}, {"b", "1"}, {"c", "4"}};
    for (const auto& [tag, workers] : plan) {
        const fs::path dir = work / ("determinism_" + tag);
        fs::remove_all(dir);
        const std::string s = (dir / "synth").string();
        const std::string sp = (dir / "split").string();
        int rc = run_cli({"synth", "--out-dir", s, "--seed", "11", "--workers", workers});
        rc |= run_cli({"split", "--schema", s + "/schema.json", "--dialogues", s + "/dialogues.jsonl", "--few-shot",
                       "0.1", "--seed", "11", "--out-dir", sp, "--workers", workers});
        rc |= run_cli({"gen-instructions", "--schema", s + "/schema.json", "--dialogues", sp + "/train.jsonl", "--out",
                       (dir / "assembled.jsonl").string(), "--seed", "11", "--workers", workers});
        rc |= run_cli({"gen-instructions", "--fixed", "--schema", s + "/schema.json", "--dialogues",
                       s + "/dialogues.jsonl", "--out", (dir / "fixed.jsonl").string(), "--workers", workers});
        if (rc != 0) return {false, "a subcommand failed"};
        runs.push_back(tree_bytes(dir));
    }
    const bool ok = runs[0].size() == 7 && runs[0] == runs[1] && runs[0] == runs[2];
    std::size_t bytes = 0;
    for (const auto& [name, content] : runs[0]) bytes += content.size();
    return {ok, std::to_string(runs[0].size()) + " files, " + std::to_string(bytes) +
                    " bytes, identical across repeat and workers 1/4"};
}

// ---- 7 and 8 ----------------------------------------------------------------

struct DeskState {
    DeskConfig cfg;
    std::optional<DeskData> data;
    std::optional<Model> base;
    std::optional<Model> tuned;
    EvalReport report;
};

Outcome desk_end_to_end(DeskState& st) {
    const auto t0 = std::chrono::steady_clock::now();
    st.data = make_desk_data(st.cfg);
    const DeskData& data = *st.data;
    st.base = pretrain_base(data, st.cfg);
    const double t_pre = seconds_since(t0);
    st.tuned = finetune_adapters(*st.base, data, st.cfg, DatasetMode::assembled);
    const double t_tune = seconds_since(t0);
    st.report = evaluate_variant(*st.tuned, data, st.cfg, st.cfg.eval_variant);
    const double elapsed = seconds_since(t0);
    const EvalReport none = evaluate(none_predictions(data.split.eval, data.corpus.schema), data.split.eval,
                                     data.corpus.schema);
    const double jga = st.report.jga;
    return {jga >= kDeskJgaMin && jga > none.jga && elapsed <= kDeskSeconds,
            "held-out jga=" + fmt(jga, 4) + " all-none jga=" + fmt(none.jga, 4) + " in " + fmt(elapsed, 4) +
                "s (pretrain " + fmt(t_pre, 4) + "s, adapters " + fmt(t_tune - t_pre, 4) + "s; " +
                std::to_string(data.split.eval.size()) + " held-out dialogues, " +
                std::to_string(data.corpus.schema.size()) + " slots)"};
}

Outcome desk_ablation(DeskState& st, const fs::path& work) {
    if (!st.tuned) return {false, "desk pipeline did not run"};
    const DeskData& data = *st.data;
    const Model fixed = finetune_adapters(*st.base, data, st.cfg, DatasetMode::fixed);
    const EvalReport rf = evaluate_variant(fixed, data, st.cfg, st.cfg.eval_variant);
    const SweepResult sa = prompt_sweep(*st.tuned, data, st.cfg);
    const SweepResult sf = prompt_sweep(fixed, data, st.cfg);
    const fs::path dir = work / "desk";
    fs::create_directories(dir);
    write_file((dir / "sweep_assembled.tsv").string(), sweep_tsv(sa));
    write_file((dir / "sweep_fixed.tsv").string(), sweep_tsv(sf));
    write_file((dir / "report_assembled.json").string(), report_to_json(st.report));
    write_file((dir / "report_fixed.json").string(), report_to_json(rf));
    const bool complete = sa.reports.size() == 6 && sf.reports.size() == 6;
    const double ja = st.report.jga;
    return {complete, "assembled jga=" + fmt(ja, 4) + " fixed jga=" + fmt(rf.jga, 4) +
                          "; six-prompt mean/variance assembled " + fmt(sa.stats.mean, 4) + "/" +
                          fmt(sa.stats.variance, 3) + ", fixed " + fmt(sf.stats.mean, 4) + "/" +
                          fmt(sf.stats.variance, 3) + "; assembled>=fixed " + (ja >= rf.jga ? "yes" : "no") +
                          ", lower variance " + (sa.stats.variance < sf.stats.variance ? "yes" : "no") +
                          " (directional, non-blocking)"};
}

// ---- 9 ----------------------------------------------------------------------

class Stub {
public:
    std::atomic<int> hits{0};
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};
    std::atomic<int> fail_first{0};

    Stub() {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const int now = ++in_flight;
            int seen = peak.load();
            while (now > seen && !peak.compare_exchange_weak(seen, now)) {
            }
            ++hits;
            std::this_thread::sleep_for(std::chrono::milliseconds(40));
            --in_flight;
            if (fail_first > 0) {
                --fail_first;
                res.status = 429;
                return;
            }
            const json doc = json::parse(req.body);
            const std::string prompt = doc["messages"][0]["content"];
            json body;
            body["choices"] = json::array({{{"message", {{"role", "assistant"}, {"content", "none"}}}}});
            body["usage"] = {{"prompt_tokens", static_cast<long>(prompt.size() / 4)}, {"completion_tokens", 1}};
            res.set_content(body.dump(), "application/json");
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

Outcome gateway_contract(const fs::path& work) {
    Stub stub;
    GatewayConfig c;
    c.endpoint = stub.endpoint();
    c.model = "stub";
    c.api_key_env = "";
    c.max_in_flight = 3;
    c.requests_per_minute = 6000.0;
    c.retry.backoff_base_s = 0.05;
    c.timeout_s = 10.0;
    c.cache_dir = (work / "gateway_cache").string();
    fs::remove_all(c.cache_dir);

    std::vector<std::string> prompts;
    for (int i = 0; i < 24; ++i) prompts.push_back("prompt number " + std::to_string(i));
    stub.fail_first = 2;
    Gateway first(c);
    const auto results = first.complete_all(prompts);
    bool all_ok = std::all_of(results.begin(), results.end(), [](const auto& o) { return o.record.has_value(); });
    const int peak = stub.peak;
    const long retries = first.stats().retries;
    const int hits_first = stub.hits;

    Gateway second(c);
    const auto replay = second.complete_all(prompts);
    all_ok = all_ok && std::all_of(replay.begin(), replay.end(),
                                   [](const auto& o) { return o.record && o.record->from_cache; });
    const int extra_hits = stub.hits - hits_first;

    GatewayConfig off = c;
    off.offline = true;
    Gateway offline(off);
    const auto offline_replay = offline.complete_all(prompts);
    all_ok = all_ok && std::all_of(offline_replay.begin(), offline_replay.end(),
                                   [](const auto& o) { return o.record && o.record->from_cache; });

    const bool ok = all_ok && peak <= c.max_in_flight && retries >= 2 && extra_hits == 0 &&
                    second.stats().network_requests == 0 && stub.hits == hits_first;
    return {ok, "peak in-flight " + std::to_string(peak) + "/" + std::to_string(c.max_in_flight) + ", 429 retries " +
                    std::to_string(retries) + ", replay network calls " + std::to_string(extra_hits)};
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = fs::temp_directory_path() / "dstkit_acceptance";
    bool skip_desk = false;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work-dir" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--skip-desk") {
            skip_desk = true;
        }
    }
    fs::create_directories(work);

    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("AC%d %s %-22s %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    };

    report(1, "parameter-accounting", parameter_accounting);
    report(2, "instruction-count", instruction_count);
    report(3, "lora-math", lora_math);
    report(4, "metric-oracle", [] { return metric_oracle(DSTKIT_FIXTURE_DIR); });
    report(5, "coin-fairness", coin_fairness);
    report(6, "determinism", [&] { return determinism(work); });
    if (skip_desk) {
        std::printf("AC7 SKIP desk-end-to-end\nAC8 SKIP ablation-sensitivity\n");
    } else {
        DeskState desk;
        report(7, "desk-end-to-end", [&] { return desk_end_to_end(desk); });
        report(8, "ablation-sensitivity", [&] { return desk_ablation(desk, work); });
    }
    report(9, "gateway-contract", [&] { return gateway_contract(work); });
    return failures == 0 ? 0 : 1;
}
