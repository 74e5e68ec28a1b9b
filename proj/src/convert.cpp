#include "dstkit/convert.hpp"

#include <json.hpp>

#include "dstkit/errors.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;

SourceFormat source_format_from_string(std::string_view name) {
    if (name == "sgd") return SourceFormat::sgd;
    if (name == "multiwoz") return SourceFormat::multiwoz;
    throw UsageError("unknown source format: " + std::string(name) + " (expected sgd or multiwoz)");
}

namespace {

json parse_or_throw(std::string_view text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("malformed ") + what + ": " + e.what());
    }
}

std::string strip_domain_prefix(const std::string& slot, const std::string& service) {
    const std::string prefix = to_lower(service) + "-";
    if (to_lower(slot).rfind(prefix, 0) == 0) return slot.substr(prefix.size());
    return slot;
}

std::string first_value(const json& v) {
    if (v.is_array()) return v.empty() ? std::string() : first_value(v[0]);
    if (v.is_string()) return v.get<std::string>();
    if (v.is_null()) return {};
    return v.dump();
}

}  // namespace

ConvertResult convert_corpus(SourceFormat format, std::string_view schema_document,
                             std::span<const std::string> dialogue_documents) {
    json schema_doc = parse_or_throw(schema_document, "schema document");
    if (format == SourceFormat::multiwoz) {
        json& services = schema_doc.is_array() ? schema_doc : schema_doc["services"];
        for (json& svc : services) {
            const std::string service = svc.value("service_name", svc.value("name", std::string()));
            for (json& slot : svc["slots"]) {
                slot["name"] = strip_domain_prefix(slot.at("name").get<std::string>(), service);
            }
        }
    }
    ConvertResult out{load_schema(schema_doc.dump()), {}, {}};
    const Schema& schema = out.schema;

    for (const std::string& doc_text : dialogue_documents) {
        const json doc = parse_or_throw(doc_text, "dialogue document");
        if (!doc.is_array()) throw DataError("dialogue document must be a list of dialogues");
        for (const json& jd : doc) {
            Dialogue d;
            d.id = jd.value("dialogue_id", std::string());
            if (d.id.empty()) throw DataError("dialogue without dialogue_id");
            for (const json& s : jd.value("services", json::array())) d.services.push_back(to_lower(s.get<std::string>()));
            DialogueState state = DialogueState::empty(schema);
            std::string pending_system;
            for (const json& turn : jd.at("turns")) {
                const std::string speaker = to_lower(turn.value("speaker", std::string()));
                const std::string utterance = turn.value("utterance", std::string());
                if (speaker == "system") {
                    pending_system = utterance;
                    continue;
                }
                if (speaker != "user") throw DataError(d.id + ": unknown speaker '" + speaker + "'");
                for (const json& frame : turn.value("frames", json::array())) {
                    const std::string service = frame.value("service", std::string());
                    if (!frame.contains("state")) continue;
                    // the frame carries the full state of its service
                    for (std::size_t j : schema.slots_of_domain(service)) state.values[j] = Value::none();
                    const json slot_values = frame.at("state").value("slot_values", json::object());
                    for (const auto& [slot, value] : slot_values.items()) {
                        const std::string name =
                            format == SourceFormat::multiwoz ? strip_domain_prefix(slot, service) : slot;
                        const std::string id = to_lower(service + "-" + name);
                        const auto idx = schema.index_of(id);
                        if (!idx) {
                            out.warnings.push_back(d.id + ": dropped value for unknown slot " + id);
                            continue;
                        }
                        state.values[*idx] = canonical_value(first_value(value));
                    }
                }
                if (trim(utterance).empty()) throw DataError(d.id + ": empty user utterance");
                d.turns.push_back({pending_system, utterance});
                d.gold_states.push_back(state);
                pending_system.clear();
            }
            if (d.turns.empty()) {
                out.warnings.push_back(d.id + ": no user turns, skipped");
                continue;
            }
            out.dialogues.push_back(std::move(d));
        }
    }
    return out;
}

}  // namespace dstkit
