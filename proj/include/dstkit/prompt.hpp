#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dstkit/corpus.hpp"
#include "dstkit/tokenizer.hpp"

namespace dstkit {

enum class InstructionKind : std::uint8_t { standard, customized, fixed };

std::string to_string(InstructionKind kind);
InstructionKind instruction_kind_from_string(std::string_view name);

/// Text templates for instruction samples and remote-LLM prompts. Templates
/// use `{name}` placeholders; `{{` and `}}` are literal braces.
///
/// Placeholders available to the slot-level templates:
///   {domain} {slot} {slot_id} {slot_display} {domain_description}
///   {slot_description} {values} {seg_system} {seg_user} {seg_domain}
///   {seg_slot} {seg_pvl}
/// Remote-prompt templates additionally see {context} {slot_info} {pvl}
/// {query} {slot_list} {demo_context} {demo_slot} {demo_answer}
/// {demo_multi_answer}.
struct TemplateSet {
    std::string seg_system = "[SYSTEM]";
    std::string seg_user = "[USER]";
    std::string seg_domain = "[domain]";
    std::string seg_slot = "[slot]";
    std::string seg_pvl = "[Possible Values]";

    std::string standard_instruction;
    std::string customized_instruction;
    std::string fixed_instruction;
    std::string description_section;
    std::string pvl_section;
    std::string query_section;

    std::string remote_single_instruction;
    std::string remote_multi_instruction;
    std::string remote_single_demo_instruction;
    std::string remote_multi_demo_instruction;
    std::string remote_slot_info;
    std::string remote_pvl;
    std::string remote_query;
    std::string remote_single_input;
    std::string remote_multi_input;
    std::string remote_single_demo_input;
    std::string remote_multi_demo_input;

    std::string demo_context;
    std::string demo_slot;
    std::string demo_answer;
    std::string demo_multi_answer;

    // The shipped default set.
    static TemplateSet defaults();
    // A shorter set for byte-level toy models with small context windows.
    static TemplateSet compact();

    // Template file: "@name" header lines open a section whose body runs to
    // the next header; lines starting with '#' before the first header are
    // comments. Sections not present keep the values of `base`.
    static TemplateSet parse(std::string_view text, const TemplateSet& base = defaults());
    std::string serialize() const;

    // Throws DataError if any template has an unknown placeholder.
    void validate() const;

    std::vector<std::string> segment_tokens() const {
        return {seg_system, seg_user, seg_domain, seg_slot, seg_pvl};
    }

    friend bool operator==(const TemplateSet&, const TemplateSet&) = default;
};

// Substitutes `{name}` placeholders; unresolved names throw DataError.
std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& vars);

struct AssemblyPolicy {
    double p_description = 0.5;
    double p_pvl = 0.5;
    double p_customized = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SampleMeta {
    std::string dialogue_id;
    std::size_t turn_index = 0;  // 1-based
    std::string slot_id;
    bool included_description = false;
    bool included_pvl = false;
    InstructionKind instruction_template = InstructionKind::standard;

    friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

// The pieces `input` was joined from. Only present on samples built in this
// process; needed by truncate_to_budget.
struct InputLayout {
    std::vector<std::string> turns;     // one rendered segment group per turn
    std::vector<std::string> sections;  // description, PVL, query (non-empty ones)

    friend bool operator==(const InputLayout&, const InputLayout&) = default;
};

struct InstructionSample {
    std::string instruction;
    std::string input;
    std::string output;
    SampleMeta meta;
    std::optional<InputLayout> layout;
};

// Which instruction/input parts a sample carries.
struct PromptVariant {
    InstructionKind instruction = InstructionKind::standard;
    bool description = true;
    bool pvl = true;

    std::string label() const;
};

// The six test-time prompt variants used by the sensitivity sweep:
// {standard, customized} x {description+PVL, description only, bare}.
std::vector<PromptVariant> sensitivity_variants();

std::string render_context(std::span<const Turn> turns, const TemplateSet& templates);

// Deterministic builder: sample for turn `turn_index` (1-based) and `slot`
// with exactly the parts requested by `variant` (PVL only for categorical
// slots). Throws std::out_of_range for a bad turn index.
InstructionSample build_sample(const Dialogue& dialogue, std::size_t turn_index,
                               const SlotSpec& slot, const Schema& schema,
                               const TemplateSet& templates, const PromptVariant& variant);

// Randomized assembly. The instruction kind and the description/PVL coins
// come from a stream keyed by (seed, dialogue id, turn, slot id).
InstructionSample assemble_sample(const Dialogue& dialogue, std::size_t turn_index,
                                  const SlotSpec& slot, const Schema& schema,
                                  const TemplateSet& templates, const AssemblyPolicy& policy);

// Fixed-template baseline: fixed instruction, description always, PVL
// whenever the slot is categorical.
InstructionSample fixed_sample(const Dialogue& dialogue, std::size_t turn_index,
                               const SlotSpec& slot, const Schema& schema,
                               const TemplateSet& templates);

enum class DatasetMode : std::uint8_t { assembled, fixed };

// One sample per (dialogue, turn, slot) in that order: sum_d T_d * J samples.
// Output is identical for every `workers` value.
std::vector<InstructionSample> generate_instruction_dataset(
    std::span<const Dialogue> corpus, const Schema& schema, const TemplateSet& templates,
    const AssemblyPolicy& policy, DatasetMode mode = DatasetMode::assembled,
    unsigned workers = 1);

// Same layout for an arbitrary fixed variant (used by the prompt sweep).
std::vector<InstructionSample> generate_variant_dataset(std::span<const Dialogue> corpus,
                                                        const Schema& schema,
                                                        const TemplateSet& templates,
                                                        const PromptVariant& variant);

// Text the model conditions on: instruction, newline, input, newline.
std::string prompt_text(const InstructionSample& sample);

// Tokens a training sequence for `sample` occupies: BOS + prompt + output + EOS.
std::size_t sequence_length(const InstructionSample& sample, const Tokenizer& tokenizer);

// Drops the oldest turns until sequence_length <= budget. The description,
// PVL and query sections are never dropped. Throws std::invalid_argument
// when those alone do not fit, and DataError when the sample is over budget
// and carries no layout.
InstructionSample truncate_to_budget(const InstructionSample& sample, std::size_t budget,
                                     const Tokenizer& tokenizer);

// ---- remote-LLM prompts ----------------------------------------------------

enum class RemoteMode : std::uint8_t { single_no_demo, multi_no_demo, single_one_demo, multi_one_demo };

std::string to_string(RemoteMode mode);
RemoteMode remote_mode_from_string(std::string_view name);
bool is_single(RemoteMode mode) noexcept;
bool uses_demo(RemoteMode mode) noexcept;

struct DemoExemplar {
    std::string context;
    std::string slot;          // display id of the demo slot
    std::string answer;        // single-return answer
    std::string multi_answer;  // multi-return answer line

    static DemoExemplar from_templates(const TemplateSet& templates);
};

// Single modes take exactly one slot; multi modes take the slot list to
// enumerate (normally the whole schema). `demo` must be given iff the mode
// uses one. Violations throw std::invalid_argument.
std::string remote_prompt(RemoteMode mode, std::string_view context,
                          std::span<const SlotSpec> slots, const TemplateSet& templates,
                          const DemoExemplar* demo = nullptr);

// ---- dataset file ----------------------------------------------------------

// {"instruction","input","output","meta":{...}} in that field order.
std::string sample_to_json(const InstructionSample& sample);
InstructionSample sample_from_json(std::string_view line);
std::string samples_to_jsonl(std::span<const InstructionSample> samples);
std::vector<InstructionSample> samples_from_jsonl(std::string_view document);

}  // namespace dstkit
