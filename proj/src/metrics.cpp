#include "dstkit/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dstkit/errors.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string to_string(MatchPolicy policy) {
    return policy == MatchPolicy::exact ? "exact" : "relaxed";
}

MatchPolicy match_policy_from_string(std::string_view name) {
    if (name == "exact") return MatchPolicy::exact;
    if (name == "relaxed") return MatchPolicy::relaxed;
    throw UsageError("unknown match policy: " + std::string(name));
}

std::string normalize_value(std::string_view text, MatchPolicy policy) {
    std::string out = to_lower(trim(text));
    if (policy == MatchPolicy::exact) return out;
    out = collapse_spaces(out);
    static const std::regex clock(R"(^(\d{1,2})(?::(\d{2}))?\s*([ap])\.?\s*m\.?$)");
    std::smatch m;
    if (std::regex_match(out, m, clock)) {
        int hour = std::stoi(m[1].str());
        const int minute = m[2].matched ? std::stoi(m[2].str()) : 0;
        if (hour >= 1 && hour <= 12 && minute < 60) {
            const bool pm = m[3].str() == "p";
            if (hour == 12) hour = 0;
            if (pm) hour += 12;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%02d:%02d", hour, minute);
            return buf;
        }
    }
    return out;
}

bool values_match(const Value& pred, const Value& gold, MatchPolicy policy) {
    if (pred.kind != gold.kind) return false;
    if (pred.kind != Value::Kind::literal) return true;
    return normalize_value(pred.text, policy) == normalize_value(gold.text, policy);
}

void PredictionSet::set(std::string dialogue_id, std::size_t turn, std::string_view slot_id,
                        Value value) {
    entries[PredictionKey{std::move(dialogue_id), turn, to_lower(slot_id)}] = std::move(value);
}

const Value* PredictionSet::find(std::string_view dialogue_id, std::size_t turn,
                                 std::string_view slot_id) const {
    auto it = entries.find(PredictionKey{std::string(dialogue_id), turn, std::string(slot_id)});
    return it == entries.end() ? nullptr : &it->second;
}

PredictionSet load_predictions(std::string_view document) {
    PredictionSet out;
    std::size_t line_no = 0;
    for (const std::string& raw : split(document, '\n')) {
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty()) continue;
        try {
            const json rec = json::parse(line);
            const auto turn = rec.at("turn").get<long>();
            if (turn < 1) throw DataError("turn must be >= 1");
            const json& v = rec.at("value");
            out.set(rec.at("dialogue_id").get<std::string>(), static_cast<std::size_t>(turn),
                    rec.at("slot").get<std::string>(),
                    v.is_null() ? Value::none() : canonical_value(v.get<std::string>()));
            if (out.provenance.empty() && rec.contains("provenance")) {
                out.provenance = rec["provenance"].get<std::string>();
            }
        } catch (const json::exception& e) {
            throw DataError("predictions line " + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("predictions line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string predictions_to_jsonl(const PredictionSet& preds) {
    std::string out;
    for (const auto& [key, value] : preds.entries) {
        ordered_json rec;
        rec["dialogue_id"] = key.dialogue_id;
        rec["turn"] = key.turn;
        rec["slot"] = key.slot_id;
        rec["value"] = value.render();
        out += rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        out += '\n';
    }
    return out;
}

std::string to_string(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::missed: return "missed";
        case ErrorCategory::hallucinated: return "hallucinated";
        case ErrorCategory::dontcare_confusion: return "dontcare_confusion";
        case ErrorCategory::wrong_value: return "wrong_value";
    }
    return "wrong_value";
}

ErrorCategory classify_error(const Value& pred, const Value& gold) {
    using K = Value::Kind;
    if ((pred.kind == K::dontcare && gold.kind == K::none) ||
        (pred.kind == K::none && gold.kind == K::dontcare)) {
        return ErrorCategory::dontcare_confusion;
    }
    if (gold.is_set() && pred.is_none()) return ErrorCategory::missed;
    if (gold.is_none() && pred.is_set()) return ErrorCategory::hallucinated;
    return ErrorCategory::wrong_value;
}

std::vector<SlotErrors> ErrorReport::top(std::size_t k) const {
    return {per_slot.begin(), per_slot.begin() + static_cast<long>(std::min(k, per_slot.size()))};
}

std::vector<std::string> active_slots(const Dialogue& dialogue, const Schema& schema, std::size_t t) {
    if (t < 1 || t > dialogue.gold_states.size()) {
        throw std::out_of_range("turn " + std::to_string(t) + " outside 1.." +
                                std::to_string(dialogue.gold_states.size()) + " of " + dialogue.id);
    }
    const DialogueState& now = dialogue.gold_states[t - 1];
    std::vector<std::string> out;
    for (std::size_t j = 0; j < schema.size(); ++j) {
        const Value& v = now.at(j);
        const Value prev = t >= 2 ? dialogue.gold_states[t - 2].at(j) : Value::none();
        if (v.is_set() && !(v == prev)) out.push_back(schema[j].id());
    }
    return out;
}

EvalReport evaluate(const PredictionSet& preds, std::span<const Dialogue> gold, const Schema& schema,
                    const EvalOptions& options, Warnings* warnings) {
    EvalReport r;
    r.provenance = preds.provenance;
    r.policy = options.policy;
    r.aga_mode = options.aga_mode;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> by_turn;  // turn -> (correct, n)
    std::map<std::string, std::size_t> slot_errors;
    std::size_t joint_correct = 0;
    std::size_t expected = 0;
    std::size_t matched_keys = 0;
    double macro_sum = 0.0;
    std::size_t macro_turns = 0;
    const Value none = Value::none();

    for (const Dialogue& d : gold) {
        for (std::size_t t = 1; t <= d.gold_states.size(); ++t) {
            const DialogueState& g = d.gold_states[t - 1];
            const DialogueState* prev = t >= 2 ? &d.gold_states[t - 2] : nullptr;
            bool all_ok = true;
            std::size_t active = 0;
            std::size_t active_ok = 0;
            for (std::size_t j = 0; j < schema.size(); ++j) {
                const std::string id = schema[j].id();
                ++expected;
                const Value* p = preds.find(d.id, t, id);
                if (p != nullptr) {
                    ++matched_keys;
                } else {
                    ++r.missing_predictions;
                    p = &none;
                }
                const Value& gv = g.at(j);
                const bool ok = values_match(*p, gv, options.policy);
                if (!ok) {
                    all_ok = false;
                    ++r.errors.counts[static_cast<std::size_t>(classify_error(*p, gv))];
                    ++r.errors.mismatches;
                    ++slot_errors[id];
                }
                const Value& pv = prev != nullptr ? prev->at(j) : none;
                if (gv.is_set() && !(gv == pv)) {
                    ++active;
                    if (ok) ++active_ok;
                }
            }
            ++r.n_turns;
            if (all_ok) ++joint_correct;
            auto& bt = by_turn[t];
            bt.first += all_ok ? 1 : 0;
            bt.second += 1;
            r.n_active_slot_instances += active;
            r.n_active_correct += active_ok;
            if (active > 0) {
                macro_sum += static_cast<double>(active_ok) / static_cast<double>(active);
                ++macro_turns;
            }
        }
    }
    r.jga = r.n_turns > 0 ? static_cast<double>(joint_correct) / static_cast<double>(r.n_turns) : 0.0;
    if (r.n_active_slot_instances > 0) {
        r.aga = options.aga_mode == AgaMode::micro
                    ? static_cast<double>(r.n_active_correct) /
                          static_cast<double>(r.n_active_slot_instances)
                    : macro_sum / static_cast<double>(macro_turns);
    }
    for (const auto& [turn, cn] : by_turn) {
        r.per_turn_jga.push_back({turn, static_cast<double>(cn.first) / static_cast<double>(cn.second),
                                  cn.second});
    }
    for (const auto& [id, n] : slot_errors) r.errors.per_slot.push_back({id, n});
    std::stable_sort(r.errors.per_slot.begin(), r.errors.per_slot.end(),
                     [](const SlotErrors& a, const SlotErrors& b) {
                         if (a.count != b.count) return a.count > b.count;
                         return a.slot_id < b.slot_id;
                     });
    if (warnings != nullptr) {
        if (r.missing_predictions > 0) {
            warnings->push_back(std::to_string(r.missing_predictions) + " of " +
                                std::to_string(expected) +
                                " predictions missing; scored as NONE");
        }
        if (matched_keys < preds.entries.size()) {
            warnings->push_back(std::to_string(preds.entries.size() - matched_keys) +
                                " predictions do not match any gold (dialogue, turn, slot)");
        }
    }
    return r;
}

double jga(const PredictionSet& preds, std::span<const Dialogue> gold, const Schema& schema,
           MatchPolicy policy) {
    return evaluate(preds, gold, schema, {policy, AgaMode::micro}).jga;
}

double aga(const PredictionSet& preds, std::span<const Dialogue> gold, const Schema& schema,
           MatchPolicy policy, AgaMode mode) {
    const EvalReport r = evaluate(preds, gold, schema, {policy, mode});
    if (!r.aga) throw DataError("AGA undefined: no active slot instance in the gold corpus");
    return *r.aga;
}

std::vector<TurnJga> per_turn_jga(const PredictionSet& preds, std::span<const Dialogue> gold,
                                  const Schema& schema, MatchPolicy policy) {
    return evaluate(preds, gold, schema, {policy, AgaMode::micro}).per_turn_jga;
}

ErrorReport error_report(const PredictionSet& preds, std::span<const Dialogue> gold,
                         const Schema& schema, MatchPolicy policy) {
    return evaluate(preds, gold, schema, {policy, AgaMode::micro}).errors;
}

Sensitivity population_stats(std::span<const double> values) {
    Sensitivity s;
    s.values.assign(values.begin(), values.end());
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.variance = sq / static_cast<double>(values.size());
    return s;
}

Sensitivity prompt_sensitivity(std::span<const EvalReport> reports) {
    if (reports.size() < 2) {
        throw std::invalid_argument("prompt sensitivity needs at least two reports");
    }
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.jga);
    return population_stats(v);
}

PredictionSet gold_predictions(std::span<const Dialogue> gold, const Schema& schema) {
    PredictionSet p;
    p.provenance = "gold";
    for (const Dialogue& d : gold) {
        for (std::size_t t = 1; t <= d.gold_states.size(); ++t) {
            for (std::size_t j = 0; j < schema.size(); ++j) {
                p.set(d.id, t, schema[j].id(), d.gold_states[t - 1].at(j));
            }
        }
    }
    return p;
}

PredictionSet none_predictions(std::span<const Dialogue> gold, const Schema& schema) {
    PredictionSet p;
    p.provenance = "all-none";
    for (const Dialogue& d : gold) {
        for (std::size_t t = 1; t <= d.gold_states.size(); ++t) {
            for (std::size_t j = 0; j < schema.size(); ++j) p.set(d.id, t, schema[j].id(), Value::none());
        }
    }
    return p;
}

std::string report_to_json(const EvalReport& r, std::size_t top_k) {
    ordered_json doc;
    doc["provenance"] = r.provenance;
    doc["policy"] = to_string(r.policy);
    doc["aga_mode"] = r.aga_mode == AgaMode::micro ? "micro" : "macro";
    doc["jga"] = r.jga;
    doc["aga"] = r.aga ? ordered_json(*r.aga) : ordered_json(nullptr);
    doc["n_turns"] = r.n_turns;
    doc["n_active_slot_instances"] = r.n_active_slot_instances;
    doc["n_active_correct"] = r.n_active_correct;
    doc["missing_predictions"] = r.missing_predictions;
    ordered_json per_turn = ordered_json::array();
    for (const auto& t : r.per_turn_jga) per_turn.push_back({{"turn", t.turn}, {"jga", t.jga}, {"n", t.n}});
    doc["per_turn_jga"] = per_turn;
    ordered_json tax;
    for (ErrorCategory c : kErrorCategories) tax[to_string(c)] = r.errors.count(c);
    doc["error_taxonomy"] = tax;
    doc["mismatches"] = r.errors.mismatches;
    ordered_json per_slot = ordered_json::object();
    for (const auto& s : r.errors.per_slot) per_slot[s.slot_id] = s.count;
    doc["per_slot_errors"] = per_slot;
    ordered_json top = ordered_json::array();
    for (const auto& s : r.errors.top(top_k)) top.push_back({{"slot", s.slot_id}, {"errors", s.count}});
    doc["top_error_slots"] = top;
    return doc.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view document) {
    EvalReport r;
    try {
        const json doc = json::parse(document);
        r.provenance = doc.value("provenance", "");
        r.policy = match_policy_from_string(doc.value("policy", "exact"));
        r.aga_mode = doc.value("aga_mode", "micro") == "macro" ? AgaMode::macro : AgaMode::micro;
        r.jga = doc.at("jga").get<double>();
        if (doc.contains("aga") && !doc["aga"].is_null()) r.aga = doc["aga"].get<double>();
        r.n_turns = doc.value("n_turns", std::size_t{0});
        r.n_active_slot_instances = doc.value("n_active_slot_instances", std::size_t{0});
        r.n_active_correct = doc.value("n_active_correct", std::size_t{0});
        r.missing_predictions = doc.value("missing_predictions", std::size_t{0});
        for (const auto& t : doc.value("per_turn_jga", json::array())) {
            r.per_turn_jga.push_back({t.at("turn").get<std::size_t>(), t.at("jga").get<double>(),
                                      t.at("n").get<std::size_t>()});
        }
        if (doc.contains("error_taxonomy")) {
            for (ErrorCategory c : kErrorCategories) {
                r.errors.counts[static_cast<std::size_t>(c)] =
                    doc["error_taxonomy"].value(to_string(c), std::size_t{0});
            }
        }
        r.errors.mismatches = doc.value("mismatches", std::size_t{0});
        if (doc.contains("per_slot_errors")) {
            for (const auto& [k, v] : doc["per_slot_errors"].items()) {
                r.errors.per_slot.push_back({k, v.get<std::size_t>()});
            }
            std::stable_sort(r.errors.per_slot.begin(), r.errors.per_slot.end(),
                             [](const SlotErrors& a, const SlotErrors& b) {
                                 if (a.count != b.count) return a.count > b.count;
                                 return a.slot_id < b.slot_id;
                             });
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("bad report: ") + e.what());
    }
    return r;
}

std::string per_turn_tsv(const EvalReport& report) {
    std::ostringstream out;
    out.precision(10);
    out << "turn\tjga\tn\n";
    for (const auto& t : report.per_turn_jga) out << t.turn << '\t' << t.jga << '\t' << t.n << '\n';
    return out.str();
}

}  // namespace dstkit
