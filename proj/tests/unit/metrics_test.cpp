#include <doctest.h>

#include <cmath>
#include <map>

#include "dstkit/errors.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/keyed_rng.hpp"
#include "dstkit/strings.hpp"

using namespace dstkit;

namespace {

struct Fixture {
    Schema schema;
    std::vector<Dialogue> gold;
    PredictionSet preds;
};

Fixture load_fixture() {
    Fixture f;
    f.schema = load_schema(read_file(DSTKIT_FIXTURE_DIR "/metric_schema.json"));
    f.gold = load_dialogues(read_file(DSTKIT_FIXTURE_DIR "/metric_gold.jsonl"), f.schema, false);
    f.preds = load_predictions(read_file(DSTKIT_FIXTURE_DIR "/metric_predictions.jsonl"));
    return f;
}

// Independent classification written from the category definitions.
std::string oracle_category(const Value& pred, const Value& gold) {
    const bool pn = pred.kind == Value::Kind::none, gn = gold.kind == Value::Kind::none;
    const bool pd = pred.kind == Value::Kind::dontcare, gd = gold.kind == Value::Kind::dontcare;
    if ((pn && gd) || (pd && gn)) return "dontcare_confusion";
    if (pn) return "missed";
    if (gn) return "hallucinated";
    return "wrong_value";
}

bool oracle_equal(const Value& p, const Value& g) {
    if (p.kind != g.kind) return false;
    return to_lower(trim(p.text)) == to_lower(trim(g.text));
}

}  // namespace

TEST_CASE("value normalization") {
    CHECK(normalize_value(" Centre ", MatchPolicy::exact) == "centre");
    CHECK(normalize_value("2 pm", MatchPolicy::relaxed) == "14:00");
    CHECK(normalize_value("14:00", MatchPolicy::exact) == "14:00");
    CHECK(normalize_value("14:00", MatchPolicy::relaxed) == "14:00");
    CHECK(normalize_value("12 am", MatchPolicy::relaxed) == "00:00");
    CHECK(normalize_value("7:30 PM", MatchPolicy::relaxed) == "19:30");
    CHECK(normalize_value("acorn   lodge", MatchPolicy::relaxed) == "acorn lodge");
    for (const char* s : {" A  b ", "x", "2 pm", ""}) {
        const std::string once = normalize_value(s, MatchPolicy::exact);
        CHECK(normalize_value(once, MatchPolicy::exact) == once);
    }
    CHECK(match_policy_from_string("relaxed") == MatchPolicy::relaxed);
    CHECK_THROWS_AS(match_policy_from_string("fuzzy"), UsageError);
}

TEST_CASE("committed fixture scores") {
    const Fixture f = load_fixture();
    const EvalReport r = evaluate(f.preds, f.gold, f.schema);
    CHECK(r.jga == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    REQUIRE(r.aga.has_value());
    CHECK(*r.aga == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(r.n_turns == 3);
    CHECK(r.n_active_slot_instances == 4);
    REQUIRE(r.per_turn_jga.size() == 3);
    CHECK(r.per_turn_jga[0].jga == 1.0);
    CHECK(r.per_turn_jga[1].jga == 0.0);
    CHECK(r.per_turn_jga[2].jga == 1.0);
    CHECK(r.errors.mismatches == 3);
    CHECK(r.errors.count(ErrorCategory::wrong_value) == 1);
    CHECK(r.errors.count(ErrorCategory::dontcare_confusion) == 1);
    CHECK(r.errors.count(ErrorCategory::hallucinated) == 1);
    CHECK(r.errors.count(ErrorCategory::missed) == 0);
}

TEST_CASE("active slots come from state differences") {
    const Fixture f = load_fixture();
    const Dialogue& d = f.gold[0];
    CHECK(active_slots(d, f.schema, 1) == std::vector<std::string>{"hotel-area"});
    CHECK(active_slots(d, f.schema, 2) == std::vector<std::string>{"hotel-name", "train-day"});
    CHECK(active_slots(d, f.schema, 3) == std::vector<std::string>{"hotel-area"});
    CHECK_THROWS_AS(active_slots(d, f.schema, 4), std::out_of_range);
}

TEST_CASE("perfect and empty predictions") {
    const SynthCorpus c = synth_corpus({30, 3, 4, 6, 0.5}, 3);
    const EvalReport perfect = evaluate(gold_predictions(c.dialogues, c.schema), c.dialogues, c.schema);
    CHECK(perfect.jga == 1.0);
    CHECK(*perfect.aga == 1.0);
    CHECK(perfect.errors.mismatches == 0);
    // every synthetic state holds at least one set slot
    CHECK(jga(none_predictions(c.dialogues, c.schema), c.dialogues, c.schema) == 0.0);
    Warnings w;
    const EvalReport missing = evaluate(PredictionSet{}, c.dialogues, c.schema, {}, &w);
    CHECK(missing.jga == 0.0);
    CHECK_FALSE(w.empty());
}

TEST_CASE("AGA is undefined without active slots") {
    const Fixture f = load_fixture();
    Dialogue quiet = f.gold[0];
    for (auto& s : quiet.gold_states) s = DialogueState::empty(f.schema);
    std::vector<Dialogue> corpus = {quiet};
    CHECK_THROWS_AS(aga(PredictionSet{}, corpus, f.schema), DataError);
    CHECK_FALSE(evaluate(PredictionSet{}, corpus, f.schema).aga.has_value());
}

TEST_CASE("single correct turn") {
    const Fixture f = load_fixture();
    Dialogue one = f.gold[0];
    one.turns.resize(1);
    one.gold_states.resize(1);
    std::vector<Dialogue> corpus = {one};
    const auto pt = per_turn_jga(gold_predictions(corpus, f.schema), corpus, f.schema);
    REQUIRE(pt.size() == 1);
    CHECK(pt[0].turn == 1);
    CHECK(pt[0].jga == 1.0);
    CHECK(pt[0].n == 1);
}

TEST_CASE("late errors leave early turns perfect") {
    const SynthCorpus c = synth_corpus({60, 3, 4, 6, 0.5}, 12);
    PredictionSet p = gold_predictions(c.dialogues, c.schema);
    for (const auto& d : c.dialogues) {
        for (std::size_t t = 3; t <= d.num_turns(); ++t) p.set(d.id, t, c.schema[0].id(), Value::literal("zzz"));
    }
    const auto pt = per_turn_jga(p, c.dialogues, c.schema);
    REQUIRE(pt.size() >= 3);
    CHECK(pt[0].jga == 1.0);
    CHECK(pt[1].jga == 1.0);
    CHECK(pt[2].jga == 0.0);
}

TEST_CASE("error categories") {
    CHECK(classify_error(Value::none(), Value::dontcare()) == ErrorCategory::dontcare_confusion);
    CHECK(classify_error(Value::dontcare(), Value::none()) == ErrorCategory::dontcare_confusion);
    CHECK(classify_error(Value::literal("hotel"), Value::none()) == ErrorCategory::hallucinated);
    CHECK(classify_error(Value::none(), Value::literal("x")) == ErrorCategory::missed);
    CHECK(classify_error(Value::literal("a"), Value::literal("b")) == ErrorCategory::wrong_value);
    CHECK(classify_error(Value::dontcare(), Value::literal("b")) == ErrorCategory::wrong_value);
}

TEST_CASE("five mismatches across three slots") {
    const Fixture f = load_fixture();
    PredictionSet p = gold_predictions(f.gold, f.schema);
    p.set("fx-1", 1, "hotel-area", Value::none());              // missed
    p.set("fx-1", 2, "hotel-area", Value::literal("east"));     // wrong value
    p.set("fx-1", 3, "train-day", Value::none());               // dontcare confusion
    p.set("fx-1", 1, "train-leaveat", Value::literal("9"));     // hallucinated
    p.set("fx-1", 3, "train-leaveat", Value::dontcare());       // dontcare confusion
    const ErrorReport e = error_report(p, f.gold, f.schema);
    CHECK(e.mismatches == 5);
    CHECK(e.count(ErrorCategory::missed) == 1);
    CHECK(e.count(ErrorCategory::wrong_value) == 1);
    CHECK(e.count(ErrorCategory::dontcare_confusion) == 2);
    CHECK(e.count(ErrorCategory::hallucinated) == 1);
    REQUIRE(e.per_slot.size() == 3);
    CHECK(e.per_slot[0].slot_id == "hotel-area");
    CHECK(e.per_slot[0].count == 2);
    CHECK(e.per_slot[1].slot_id == "train-leaveat");
    CHECK(e.per_slot[2].slot_id == "train-day");
    CHECK(e.top(1).size() == 1);
}

TEST_CASE("metrics agree with a brute-force oracle on random predictions") {
    const SynthCorpus c = synth_corpus({40, 3, 4, 6, 0.5}, 21);
    SplitMix64 rng(4);
    const std::vector<Value> noise = {Value::none(), Value::dontcare(), Value::literal("north"),
                                      Value::literal("zzz")};
    for (int trial = 0; trial < 20; ++trial) {
        PredictionSet p = gold_predictions(c.dialogues, c.schema);
        for (auto& [key, value] : p.entries) {
            if (rng.coin(0.04)) value = noise[rng.below(noise.size())];
        }
        std::size_t turns = 0, joint = 0, active = 0, active_ok = 0, mismatches = 0;
        std::map<std::string, std::size_t> cats;
        for (const auto& d : c.dialogues) {
            for (std::size_t t = 1; t <= d.num_turns(); ++t) {
                bool all = true;
                for (std::size_t j = 0; j < c.schema.size(); ++j) {
                    const Value& g = d.gold_states[t - 1].at(j);
                    const Value* pv = p.find(d.id, t, c.schema[j].id());
                    const Value pred = pv ? *pv : Value::none();
                    const bool ok = oracle_equal(pred, g);
                    if (!ok) {
                        all = false;
                        ++mismatches;
                        ++cats[oracle_category(pred, g)];
                    }
                    const Value prev = t > 1 ? d.gold_states[t - 2].at(j) : Value::none();
                    if (g.is_set() && !(g == prev)) {
                        ++active;
                        active_ok += ok ? 1 : 0;
                    }
                }
                ++turns;
                joint += all ? 1 : 0;
            }
        }
        const EvalReport r = evaluate(p, c.dialogues, c.schema);
        CHECK(r.jga == static_cast<double>(joint) / static_cast<double>(turns));
        CHECK(*r.aga == static_cast<double>(active_ok) / static_cast<double>(active));
        CHECK(r.errors.mismatches == mismatches);
        std::size_t total = 0;
        for (ErrorCategory cat : kErrorCategories) {
            CHECK(r.errors.count(cat) == cats[to_string(cat)]);
            total += r.errors.count(cat);
        }
        CHECK(total == r.errors.mismatches);
        double weighted = 0.0;
        std::size_t n = 0;
        for (const auto& tj : r.per_turn_jga) {
            weighted += tj.jga * static_cast<double>(tj.n);
            n += tj.n;
        }
        CHECK(n == r.n_turns);
        CHECK(std::abs(weighted / static_cast<double>(n) - r.jga) <= 1e-12);
        CHECK((r.jga >= 0.0 && r.jga <= 1.0));
    }
}

TEST_CASE("macro AGA averages per turn") {
    const Fixture f = load_fixture();
    const double macro = aga(f.preds, f.gold, f.schema, MatchPolicy::exact, AgaMode::macro);
    CHECK(macro == doctest::Approx((1.0 + 0.5 + 1.0) / 3.0));
}

TEST_CASE("relaxed policy accepts 12-hour times") {
    const Fixture f = load_fixture();
    Dialogue d = f.gold[0];
    d.gold_states[2].set(f.schema, "train-leaveat", Value::literal("14:00"));
    std::vector<Dialogue> corpus = {d};
    PredictionSet p = gold_predictions(corpus, f.schema);
    p.set("fx-1", 3, "train-leaveat", Value::literal("2 pm"));
    CHECK(jga(p, corpus, f.schema, MatchPolicy::exact) < 1.0);
    CHECK(jga(p, corpus, f.schema, MatchPolicy::relaxed) == 1.0);
}

TEST_CASE("prompt sensitivity statistics") {
    EvalReport a, b;
    a.jga = 0.4;
    b.jga = 0.6;
    std::vector<EvalReport> two = {a, b};
    const Sensitivity s = prompt_sensitivity(two);
    CHECK(s.mean == doctest::Approx(0.5));
    CHECK(s.variance == doctest::Approx(0.01));
    std::vector<EvalReport> same = {a, a, a};
    CHECK(prompt_sensitivity(same).variance == doctest::Approx(0.0));
    std::vector<EvalReport> one = {a};
    CHECK_THROWS_AS(prompt_sensitivity(one), std::invalid_argument);

    std::vector<EvalReport> six(6);
    const double v[6] = {0.31, 0.42, 0.38, 0.29, 0.45, 0.40};
    for (int i = 0; i < 6; ++i) six[static_cast<std::size_t>(i)].jga = v[i];
    // mean 2.25 / 6 = 0.375; squared deviations sum to 0.01975
    const Sensitivity s6 = prompt_sensitivity(six);
    CHECK(s6.mean == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(s6.variance == doctest::Approx(0.01975 / 6.0).epsilon(1e-9));
}

TEST_CASE("prediction and report files round trip") {
    const Fixture f = load_fixture();
    const PredictionSet again = load_predictions(predictions_to_jsonl(f.preds));
    CHECK(again.entries == f.preds.entries);
    const EvalReport r = evaluate(f.preds, f.gold, f.schema);
    const EvalReport back = report_from_json(report_to_json(r));
    CHECK(back.jga == r.jga);
    CHECK(back.aga == r.aga);
    CHECK(back.per_turn_jga.size() == r.per_turn_jga.size());
    CHECK(back.errors.counts == r.errors.counts);
    CHECK(per_turn_tsv(r).rfind("turn\tjga\tn\n", 0) == 0);
    CHECK_THROWS_AS(load_predictions("{\"dialogue_id\": \"x\"}"), DataError);
    CHECK_THROWS_AS(load_predictions("{\"dialogue_id\": \"x\", \"turn\": 0, \"slot\": \"a\", \"value\": \"b\"}"),
                    DataError);
}
