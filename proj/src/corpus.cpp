#include "dstkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "dstkit/errors.hpp"
#include "dstkit/keyed_rng.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string Value::render() const {
    switch (kind) {
        case Kind::none:
            return "NONE";
        case Kind::dontcare:
            return "dontcare";
        case Kind::literal:
            break;
    }
    return text;
}

Value canonical_value(std::string_view raw) {
    const std::string_view t = trim(raw);
    const std::string lower = to_lower(t);
    if (lower.empty() || lower == "none" || lower == "not mentioned") {
        return Value::none();
    }
    if (lower == "dontcare" || lower == "don't care" || lower == "dont care") {
        return Value::dontcare();
    }
    return Value::literal(std::string(t));
}

std::string SlotSpec::id() const { return to_lower(domain) + "-" + to_lower(name); }

std::string SlotSpec::display_id() const { return domain + "-" + name; }

Schema::Schema(std::vector<SlotSpec> slots) : slots_(std::move(slots)) {
    if (slots_.empty()) {
        throw DataError("schema has no slots");
    }
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        const SlotSpec& s = slots_[i];
        if (s.domain.empty() || s.name.empty()) {
            throw DataError("slot with empty domain or name");
        }
        if (s.domain.find('-') != std::string::npos || s.name.find('-') != std::string::npos) {
            throw DataError("hyphen inside domain or slot name makes the slot id ambiguous: " +
                            s.display_id());
        }
        if (s.is_categorical && s.possible_values.empty()) {
            throw DataError("categorical slot without possible values: " + s.id());
        }
        if (!s.is_categorical && !s.possible_values.empty()) {
            throw DataError("non-categorical slot lists possible values: " + s.id());
        }
        if (!index_.emplace(s.id(), i).second) {
            throw DataError("duplicate slot id: " + s.id());
        }
    }
}

std::optional<std::size_t> Schema::index_of(std::string_view slot_id) const {
    const auto it = index_.find(to_lower(slot_id));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const SlotSpec& Schema::slot(std::string_view slot_id) const {
    const auto idx = index_of(slot_id);
    if (!idx) {
        throw DataError("unknown slot id: " + std::string(slot_id));
    }
    return slots_[*idx];
}

std::vector<std::string> Schema::domains() const {
    std::vector<std::string> out;
    for (const SlotSpec& s : slots_) {
        const std::string d = to_lower(s.domain);
        if (std::find(out.begin(), out.end(), d) == out.end()) {
            out.push_back(d);
        }
    }
    return out;
}

std::vector<std::size_t> Schema::slots_of_domain(std::string_view domain) const {
    const std::string d = to_lower(domain);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        if (to_lower(slots_[i].domain) == d) {
            out.push_back(i);
        }
    }
    return out;
}

const Value& DialogueState::get(const Schema& schema, std::string_view slot_id) const {
    const auto idx = schema.index_of(slot_id);
    if (!idx) {
        throw DataError("unknown slot id: " + std::string(slot_id));
    }
    return values.at(*idx);
}

void DialogueState::set(const Schema& schema, std::string_view slot_id, Value value) {
    const auto idx = schema.index_of(slot_id);
    if (!idx) {
        throw DataError("unknown slot id: " + std::string(slot_id));
    }
    values.at(*idx) = std::move(value);
}

std::set<std::string> Dialogue::domains_touched(const Schema& schema) const {
    std::set<std::string> out(services.begin(), services.end());
    for (const DialogueState& state : gold_states) {
        for (std::size_t i = 0; i < state.values.size(); ++i) {
            if (state.values[i].is_set()) {
                out.insert(to_lower(schema[i].domain));
            }
        }
    }
    return out;
}

bool Dialogue::sets_domain(const Schema& schema, std::string_view domain) const {
    const std::vector<std::size_t> idx = schema.slots_of_domain(domain);
    for (const DialogueState& state : gold_states) {
        for (std::size_t i : idx) {
            if (state.values[i].is_set()) {
                return true;
            }
        }
    }
    return false;
}

// ---- schema file ------------------------------------------------------------

namespace {

std::string string_field(const json& obj, const char* key, bool required) {
    const auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        if (required) {
            throw DataError(std::string("missing field '") + key + "'");
        }
        return {};
    }
    if (!it->is_string()) {
        throw DataError(std::string("field '") + key + "' must be a string");
    }
    return it->get<std::string>();
}

}  // namespace

Schema load_schema(std::string_view document) {
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("malformed schema document: ") + e.what());
    }
    const json* services = nullptr;
    if (doc.is_array()) {
        services = &doc;
    } else if (doc.is_object() && doc.contains("services") && doc["services"].is_array()) {
        services = &doc["services"];
    } else {
        throw DataError("schema document must be a list of services or {\"services\": [...]}");
    }

    std::vector<SlotSpec> slots;
    for (const json& svc : *services) {
        if (!svc.is_object()) {
            throw DataError("service entry must be an object");
        }
        std::string domain = string_field(svc, "service_name", false);
        if (domain.empty()) {
            domain = string_field(svc, "name", true);
        }
        const std::string domain_description = string_field(svc, "description", false);
        const auto it = svc.find("slots");
        if (it == svc.end() || !it->is_array()) {
            throw DataError("service '" + domain + "' has no slot list");
        }
        for (const json& js : *it) {
            if (!js.is_object()) {
                throw DataError("slot entry must be an object");
            }
            SlotSpec spec;
            spec.domain = domain;
            spec.name = string_field(js, "name", true);
            spec.description = string_field(js, "description", false);
            spec.domain_description = domain_description;
            spec.is_categorical = js.value("is_categorical", false);
            if (spec.is_categorical) {
                const auto pv = js.find("possible_values");
                if (pv != js.end() && pv->is_array()) {
                    for (const json& v : *pv) {
                        spec.possible_values.push_back(v.is_string() ? v.get<std::string>()
                                                                     : v.dump());
                    }
                }
            }
            slots.push_back(std::move(spec));
        }
    }
    return Schema(std::move(slots));
}

std::string schema_to_json(const Schema& schema) {
    ordered_json services = ordered_json::array();
    for (const std::string& domain : schema.domains()) {
        const std::vector<std::size_t> idx = schema.slots_of_domain(domain);
        const SlotSpec& first = schema[idx.front()];
        ordered_json svc;
        svc["service_name"] = first.domain;
        svc["description"] = first.domain_description;
        ordered_json slots = ordered_json::array();
        for (std::size_t i : idx) {
            const SlotSpec& s = schema[i];
            ordered_json js;
            js["name"] = s.name;
            js["description"] = s.description;
            js["is_categorical"] = s.is_categorical;
            js["possible_values"] = s.possible_values;
            slots.push_back(std::move(js));
        }
        svc["slots"] = std::move(slots);
        services.push_back(std::move(svc));
    }
    ordered_json doc;
    doc["services"] = std::move(services);
    return doc.dump(2) + "\n";
}

// ---- dialogue file ----------------------------------------------------------

namespace {

bool value_in_list(const SlotSpec& spec, const std::string& text) {
    const std::string lower = to_lower(text);
    return std::any_of(spec.possible_values.begin(), spec.possible_values.end(),
                       [&](const std::string& v) { return to_lower(v) == lower; });
}

Dialogue parse_dialogue_line(std::string_view line, const Schema& schema, bool strict,
                             Warnings& warnings) {
    json rec;
    try {
        rec = json::parse(line);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("malformed dialogue record: ") + e.what());
    }
    if (!rec.is_object()) {
        throw DataError("dialogue record must be an object");
    }
    Dialogue d;
    d.id = string_field(rec, "id", true);
    if (d.id.empty()) {
        throw DataError("dialogue with empty id");
    }
    const auto turns = rec.find("turns");
    const auto states = rec.find("states");
    if (turns == rec.end() || !turns->is_array() || states == rec.end() || !states->is_array()) {
        throw DataError("dialogue " + d.id + ": 'turns' and 'states' must be arrays");
    }
    if (turns->empty()) {
        throw DataError("dialogue " + d.id + " has no turns");
    }
    if (turns->size() != states->size()) {
        throw DataError("dialogue " + d.id + ": " + std::to_string(turns->size()) + " turns but " +
                        std::to_string(states->size()) + " states");
    }
    for (const json& jt : *turns) {
        Turn t;
        t.system_utterance = jt.is_object() ? string_field(jt, "system", false) : "";
        t.user_utterance = jt.is_object() ? string_field(jt, "user", false) : "";
        if (trim(t.user_utterance).empty()) {
            throw DataError("dialogue " + d.id + " has an empty user utterance");
        }
        d.turns.push_back(std::move(t));
    }
    for (const json& js : *states) {
        if (!js.is_object()) {
            throw DataError("dialogue " + d.id + ": state must be an object");
        }
        DialogueState state = DialogueState::empty(schema);
        for (const auto& [key, raw] : js.items()) {
            const auto idx = schema.index_of(key);
            if (!idx) {
                throw DataError("dialogue " + d.id + " references unknown slot '" + key + "'");
            }
            if (!raw.is_string()) {
                throw DataError("dialogue " + d.id + ": value of '" + key + "' must be a string");
            }
            Value v = canonical_value(raw.get<std::string>());
            const SlotSpec& spec = schema[*idx];
            if (v.kind == Value::Kind::literal && spec.is_categorical &&
                !value_in_list(spec, v.text)) {
                const std::string msg = "dialogue " + d.id + ": value '" + v.text +
                                        "' is not a possible value of " + spec.id();
                if (strict) {
                    throw DataError(msg);
                }
                warnings.push_back(msg);
            }
            state.values[*idx] = std::move(v);
        }
        d.gold_states.push_back(std::move(state));
    }
    if (const auto svc = rec.find("services"); svc != rec.end() && svc->is_array()) {
        for (const json& s : *svc) {
            if (s.is_string()) {
                d.services.push_back(to_lower(s.get<std::string>()));
            }
        }
    }
    return d;
}

}  // namespace

std::vector<Dialogue> load_dialogues(std::string_view document, const Schema& schema,
                                     bool strict, Warnings* warnings, unsigned workers) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < document.size()) {
        std::size_t end = document.find('\n', start);
        if (end == std::string_view::npos) {
            end = document.size();
        }
        std::string_view line = trim(document.substr(start, end - start));
        if (!line.empty()) {
            lines.push_back(line);
        }
        start = end + 1;
    }

    struct Slot {
        std::optional<Dialogue> dialogue;
        Warnings warnings;
        std::string error;
    };
    std::vector<Slot> results(lines.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            try {
                results[i].dialogue = parse_dialogue_line(lines[i], schema, strict,
                                                          results[i].warnings);
            } catch (const DataError& e) {
                results[i].error = e.what();
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min<std::size_t>(workers, lines.size()));
    if (n_workers <= 1) {
        work(0, lines.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (lines.size() + n_workers - 1) / n_workers;
        for (std::size_t w = 0; w < n_workers; ++w) {
            const std::size_t b = w * chunk;
            const std::size_t e = std::min(lines.size(), b + chunk);
            if (b < e) {
                pool.emplace_back(work, b, e);
            }
        }
    }

    std::vector<Dialogue> out;
    out.reserve(lines.size());
    std::set<std::string> seen;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (!results[i].error.empty()) {
            throw DataError("line " + std::to_string(i + 1) + ": " + results[i].error);
        }
        if (warnings != nullptr) {
            warnings->insert(warnings->end(), results[i].warnings.begin(),
                             results[i].warnings.end());
        }
        if (!seen.insert(results[i].dialogue->id).second) {
            throw DataError("duplicate dialogue id: " + results[i].dialogue->id);
        }
        out.push_back(std::move(*results[i].dialogue));
    }
    return out;
}

std::string dialogue_to_json(const Dialogue& dialogue, const Schema& schema) {
    ordered_json rec;
    rec["id"] = dialogue.id;
    ordered_json turns = ordered_json::array();
    for (const Turn& t : dialogue.turns) {
        ordered_json jt;
        jt["system"] = t.system_utterance;
        jt["user"] = t.user_utterance;
        turns.push_back(std::move(jt));
    }
    rec["turns"] = std::move(turns);
    ordered_json states = ordered_json::array();
    for (const DialogueState& state : dialogue.gold_states) {
        ordered_json js = ordered_json::object();
        for (std::size_t i = 0; i < state.values.size(); ++i) {
            if (state.values[i].is_set()) {
                js[schema[i].id()] = state.values[i].render();
            }
        }
        states.push_back(std::move(js));
    }
    rec["states"] = std::move(states);
    if (!dialogue.services.empty()) {
        rec["services"] = dialogue.services;
    }
    return rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::string dialogues_to_jsonl(std::span<const Dialogue> dialogues, const Schema& schema) {
    std::string out;
    for (const Dialogue& d : dialogues) {
        out += dialogue_to_json(d, schema);
        out += '\n';
    }
    return out;
}

// ---- splits -----------------------------------------------------------------

CorpusSplit few_shot_split(std::span<const Dialogue> dialogues, double fraction,
                           std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw std::invalid_argument("few-shot fraction must lie in [0, 1]");
    }
    std::vector<std::size_t> order(dialogues.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dialogues[a].id < dialogues[b].id;
    });
    SplitMix64 rng(keyed_seed(seed, {"few-shot-split"}));
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(order[i - 1], order[j]);
    }
    const auto n_train = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(dialogues.size())));

    std::vector<bool> in_train(dialogues.size(), false);
    for (std::size_t i = 0; i < n_train; ++i) {
        in_train[order[i]] = true;
    }
    CorpusSplit split;
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        (in_train[i] ? split.train : split.eval).push_back(dialogues[i]);
    }
    split.provenance = {"few-shot", seed, fraction, ""};
    return split;
}

CorpusSplit zero_shot_split(std::span<const Dialogue> dialogues, const Schema& schema,
                            std::string_view holdout_domain) {
    const std::string holdout = to_lower(holdout_domain);
    CorpusSplit split;
    for (const Dialogue& d : dialogues) {
        if (d.sets_domain(schema, holdout)) {
            split.eval.push_back(d);
        } else if (d.domains_touched(schema).count(holdout) == 0) {
            split.train.push_back(d);
        } else {
            split.excluded.push_back(d);
        }
    }
    if (split.eval.empty() && split.excluded.empty()) {
        throw UsageError("holdout domain '" + holdout + "' does not occur in the corpus");
    }
    split.provenance = {"zero-shot", 0, 0.0, holdout};
    return split;
}

}  // namespace dstkit
