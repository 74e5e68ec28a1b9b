#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "dstkit/corpus.hpp"

namespace dstkit {

enum class MatchPolicy : std::uint8_t { exact, relaxed };

std::string to_string(MatchPolicy policy);
MatchPolicy match_policy_from_string(std::string_view name);

// exact: trim + lowercase. relaxed: also collapses inner whitespace and
// rewrites 12-hour times ("2 pm", "2:30 p.m.") as 24-hour "HH:MM".
std::string normalize_value(std::string_view text, MatchPolicy policy);

bool values_match(const Value& pred, const Value& gold, MatchPolicy policy);

struct PredictionKey {
    std::string dialogue_id;
    std::size_t turn = 0;  // 1-based
    std::string slot_id;   // canonical (lowercase)

    friend auto operator<=>(const PredictionKey&, const PredictionKey&) = default;
};

/// Predicted values keyed by (dialogue, turn, slot). Keys not present score
/// as NONE.
struct PredictionSet {
    std::string provenance;
    std::map<PredictionKey, Value> entries;

    void set(std::string dialogue_id, std::size_t turn, std::string_view slot_id, Value value);
    const Value* find(std::string_view dialogue_id, std::size_t turn, std::string_view slot_id) const;
};

// Records {"dialogue_id", "turn", "slot", "value"}, one per line.
PredictionSet load_predictions(std::string_view document);
std::string predictions_to_jsonl(const PredictionSet& preds);

enum class ErrorCategory : std::uint8_t { missed, hallucinated, dontcare_confusion, wrong_value };
inline constexpr std::array<ErrorCategory, 4> kErrorCategories = {
    ErrorCategory::missed, ErrorCategory::hallucinated, ErrorCategory::dontcare_confusion,
    ErrorCategory::wrong_value};

std::string to_string(ErrorCategory category);

// Category of a mismatching pair. Call only when !values_match(pred, gold).
ErrorCategory classify_error(const Value& pred, const Value& gold);

enum class AgaMode : std::uint8_t { micro, macro };

struct TurnJga {
    std::size_t turn = 0;
    double jga = 0.0;
    std::size_t n = 0;
};

struct SlotErrors {
    std::string slot_id;
    std::size_t count = 0;
};

struct ErrorReport {
    std::array<std::size_t, 4> counts{};  // indexed by ErrorCategory
    std::vector<SlotErrors> per_slot;     // count desc, slot id asc
    std::size_t mismatches = 0;

    std::size_t count(ErrorCategory c) const { return counts[static_cast<std::size_t>(c)]; }
    std::vector<SlotErrors> top(std::size_t k) const;
};

struct EvalOptions {
    MatchPolicy policy = MatchPolicy::exact;
    AgaMode aga_mode = AgaMode::micro;
};

struct EvalReport {
    std::string provenance;
    MatchPolicy policy = MatchPolicy::exact;
    AgaMode aga_mode = AgaMode::micro;
    double jga = 0.0;
    std::optional<double> aga;  // empty when no slot is active anywhere
    std::vector<TurnJga> per_turn_jga;
    std::size_t n_turns = 0;
    std::size_t n_active_slot_instances = 0;
    std::size_t n_active_correct = 0;
    std::size_t missing_predictions = 0;
    ErrorReport errors;
};

// Slots whose gold value at turn t (1-based) is set and differs from turn
// t - 1 (turn 0 is all NONE), in schema order. Throws std::out_of_range.
std::vector<std::string> active_slots(const Dialogue& dialogue, const Schema& schema, std::size_t t);

// Scores every (dialogue, turn, slot) of `gold`. Missing predictions score
// as NONE and add a line to `warnings`.
EvalReport evaluate(const PredictionSet& preds, std::span<const Dialogue> gold,
                    const Schema& schema, const EvalOptions& options = {},
                    Warnings* warnings = nullptr);

double jga(const PredictionSet& preds, std::span<const Dialogue> gold, const Schema& schema,
           MatchPolicy policy = MatchPolicy::exact);
// Throws DataError when the corpus has no active slot instance.
double aga(const PredictionSet& preds, std::span<const Dialogue> gold, const Schema& schema,
           MatchPolicy policy = MatchPolicy::exact, AgaMode mode = AgaMode::micro);
std::vector<TurnJga> per_turn_jga(const PredictionSet& preds, std::span<const Dialogue> gold,
                                  const Schema& schema, MatchPolicy policy = MatchPolicy::exact);
ErrorReport error_report(const PredictionSet& preds, std::span<const Dialogue> gold,
                         const Schema& schema, MatchPolicy policy = MatchPolicy::exact);

struct Sensitivity {
    double mean = 0.0;
    double variance = 0.0;  // population
    std::vector<double> values;
};

// Throws std::invalid_argument for fewer than two reports.
Sensitivity prompt_sensitivity(std::span<const EvalReport> reports);
Sensitivity population_stats(std::span<const double> values);

// Predictions that copy the gold states; all-NONE baseline.
PredictionSet gold_predictions(std::span<const Dialogue> gold, const Schema& schema);
PredictionSet none_predictions(std::span<const Dialogue> gold, const Schema& schema);

std::string report_to_json(const EvalReport& report, std::size_t top_k = 5);
EvalReport report_from_json(std::string_view document);
// "turn\tjga\tn" rows.
std::string per_turn_tsv(const EvalReport& report);

}  // namespace dstkit
