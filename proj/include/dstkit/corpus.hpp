#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dstkit {

/// Slot value in a dialogue state. NONE marks a slot that the dialogue has
/// not mentioned; DONTCARE is the user explicitly waiving a preference.
struct Value {
    enum class Kind : std::uint8_t { none, dontcare, literal };

    Kind kind = Kind::none;
    std::string text;

    static Value none() { return {}; }
    static Value dontcare() { return {Kind::dontcare, {}}; }
    static Value literal(std::string text) { return {Kind::literal, std::move(text)}; }

    bool is_none() const noexcept { return kind == Kind::none; }
    bool is_set() const noexcept { return kind != Kind::none; }

    // "NONE", "dontcare", or the literal text.
    std::string render() const;

    friend bool operator==(const Value&, const Value&) = default;
};

// Maps the special spellings onto NONE / DONTCARE; anything else is a literal
// (trimmed, original case kept).
//   "", "none", "not mentioned"   -> NONE
//   "dontcare", "don't care"      -> DONTCARE
Value canonical_value(std::string_view raw);

struct SlotSpec {
    std::string domain;
    std::string name;
    std::string description;
    std::string domain_description;
    bool is_categorical = false;
    std::vector<std::string> possible_values;

    // Canonical id: lowercase "domain-name".
    std::string id() const;
    // Same join with the original casing, e.g. "Hotels_2-number_of_adults".
    std::string display_id() const;
};

/// Ordered slot set. Slot order is fixed at construction and defines the
/// iteration order of every state, dataset and report.
class Schema {
public:
    Schema() = default;
    // Throws DataError on an empty slot list, duplicate ids, hyphenated
    // domain/slot names, or a categorical slot without values.
    explicit Schema(std::vector<SlotSpec> slots);

    const std::vector<SlotSpec>& slots() const noexcept { return slots_; }
    std::size_t size() const noexcept { return slots_.size(); }
    const SlotSpec& operator[](std::size_t i) const { return slots_[i]; }

    std::optional<std::size_t> index_of(std::string_view slot_id) const;
    const SlotSpec& slot(std::string_view slot_id) const;

    // Domains in order of first appearance.
    std::vector<std::string> domains() const;
    std::vector<std::size_t> slots_of_domain(std::string_view domain) const;

private:
    std::vector<SlotSpec> slots_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Turn {
    std::string system_utterance;
    std::string user_utterance;
};

/// Total slot -> value map; values are stored in schema order.
struct DialogueState {
    std::vector<Value> values;

    static DialogueState empty(const Schema& schema) {
        return DialogueState{std::vector<Value>(schema.size())};
    }
    const Value& at(std::size_t slot_index) const { return values.at(slot_index); }
    const Value& get(const Schema& schema, std::string_view slot_id) const;
    void set(const Schema& schema, std::string_view slot_id, Value value);

    friend bool operator==(const DialogueState&, const DialogueState&) = default;
};

struct Dialogue {
    std::string id;
    std::vector<Turn> turns;
    std::vector<DialogueState> gold_states;
    // Services declared by the source corpus, if any (lowercase).
    std::vector<std::string> services;

    std::size_t num_turns() const noexcept { return turns.size(); }

    // Declared services plus every domain that has a set value in some turn.
    std::set<std::string> domains_touched(const Schema& schema) const;
    // True when some turn sets a slot of `domain`.
    bool sets_domain(const Schema& schema, std::string_view domain) const;
};

struct SplitProvenance {
    std::string kind;  // "few-shot" or "zero-shot"
    std::uint64_t seed = 0;
    double fraction = 0.0;
    std::string holdout_domain;
};

struct CorpusSplit {
    std::vector<Dialogue> train;
    std::vector<Dialogue> eval;
    // Zero-shot only: dialogues that declare the holdout service without
    // setting any of its slots. They are in neither partition.
    std::vector<Dialogue> excluded;
    SplitProvenance provenance;
};

// Diagnostics sink for non-fatal findings (lenient-mode value warnings etc).
using Warnings = std::vector<std::string>;

// ---- file formats ---------------------------------------------------------

// Schema document: {"services": [{"service_name", "description",
//   "slots": [{"name", "description", "is_categorical", "possible_values"}]}]}
// A bare top-level array of services (SGD schema.json) is accepted too.
Schema load_schema(std::string_view document);
std::string schema_to_json(const Schema& schema);

// Line-delimited dialogue records:
//   {"id", "turns": [{"system", "user"}], "states": [{slot-id: value}], "services"?}
// Unknown slot ids and turn/state length mismatches always throw DataError.
// Categorical values outside the possible-value list throw when `strict`,
// otherwise they are kept and reported through `warnings`.
std::vector<Dialogue> load_dialogues(std::string_view document, const Schema& schema,
                                     bool strict, Warnings* warnings = nullptr,
                                     unsigned workers = 1);
std::string dialogue_to_json(const Dialogue& dialogue, const Schema& schema);
std::string dialogues_to_jsonl(std::span<const Dialogue> dialogues, const Schema& schema);

// ---- splits ---------------------------------------------------------------

// Seeded uniform selection of round(fraction * N) dialogues for training.
// Depends only on the set of dialogue ids, the fraction and the seed.
CorpusSplit few_shot_split(std::span<const Dialogue> dialogues, double fraction,
                           std::uint64_t seed);

// eval: dialogues that set a holdout-domain slot.
// train: dialogues that touch the holdout domain in no way.
CorpusSplit zero_shot_split(std::span<const Dialogue> dialogues, const Schema& schema,
                            std::string_view holdout_domain);

// ---- synthetic corpora ----------------------------------------------------

struct SynthConfig {
    int n_dialogues = 200;
    int n_domains = 3;
    int slots_per_domain = 4;
    int max_turns = 8;
    double categorical_ratio = 0.5;

    void validate() const;
};

struct SynthCorpus {
    Schema schema;
    std::vector<Dialogue> dialogues;
};

// Templated dialogues over a built-in pool of domains and slots. Each
// dialogue draws from its own keyed stream, so the result is independent of
// `workers`.
SynthCorpus synth_corpus(const SynthConfig& config, std::uint64_t seed, unsigned workers = 1);

// Largest n_domains / slots_per_domain the built-in pool supports.
int synth_max_domains();
int synth_max_slots_per_domain();

}  // namespace dstkit
