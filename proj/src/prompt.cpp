#include "dstkit/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "dstkit/errors.hpp"
#include "dstkit/keyed_rng.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string to_string(InstructionKind kind) {
    switch (kind) {
        case InstructionKind::standard:
            return "standard";
        case InstructionKind::customized:
            return "customized";
        case InstructionKind::fixed:
            return "fixed";
    }
    return "standard";
}

InstructionKind instruction_kind_from_string(std::string_view name) {
    if (name == "standard") {
        return InstructionKind::standard;
    }
    if (name == "customized") {
        return InstructionKind::customized;
    }
    if (name == "fixed") {
        return InstructionKind::fixed;
    }
    throw DataError("unknown instruction template kind: " + std::string(name));
}

// ---- templates ----------------------------------------------------------------

TemplateSet TemplateSet::defaults() {
    TemplateSet t;
    t.standard_instruction =
        "Now you need to perform the task of multi-domain dialogue state tracking. You need to "
        "return the value of the slot I'm asking about simply based on the content of the "
        "dialogue. No explanation!";
    t.customized_instruction =
        "Now you need to perform the task of multi-domain dialogue state tracking. Track the "
        "state of slot <{slot_id}> in the {domain} domain based on the content of the dialogue. "
        "No explanation!";
    t.fixed_instruction = "Track the state of the slot <{slot_id}> in the input dialogue.";
    t.description_section =
        "{seg_domain} {domain}, it indicates {domain_description} {seg_slot} {slot}, it "
        "indicates {slot_description}.";
    t.pvl_section = "{seg_pvl} {values}";
    t.query_section =
        "If the slot is not mentioned in the dialogue, just return NONE. So the value of slot "
        "<{slot_id}> is";

    t.remote_single_instruction = t.standard_instruction;
    t.remote_multi_instruction =
        "Now you need to perform the task of dialogue state tracking. And the slot schema is in "
        "this list [{slot_list}], which is in a domain-slot format. You need to return the slot "
        "and its value in dict format if the value is not none, and no explanation!";
    t.remote_single_demo_instruction =
        "Now you need to perform the task of multi-domain dialogue state tracking. And I will "
        "show you an example and you need to return to the state of the slot I asked about.";
    t.remote_multi_demo_instruction =
        "Now you need to perform the task of multi-domain dialogue state tracking. And I will "
        "show you an example and you need to return the answer strictly in the format of the "
        "example.";
    t.remote_slot_info =
        "{seg_domain} {domain}, it indicates {domain_description} {seg_slot} {slot}, it "
        "indicates {slot_description}.";
    t.remote_pvl =
        " This slot is categorical and you can only choose from the following available "
        "values: {values}.";
    t.remote_query =
        "If the slot is not mentioned in the dialogue, just return NONE.\nSo the value of slot "
        "<{slot_display}> is";
    t.remote_single_input = "Input dialogue: {context} {slot_info}{pvl} {query}";
    t.remote_multi_input =
        "Input dialogue: {context}\nPlease return the value of slot list [{slot_list}].";
    t.remote_single_demo_input =
        "The example is: Input dialogue: {demo_context}\nSo the value of slot <{demo_slot}> is\n"
        "And your result should be {demo_answer}.\nThe following is the dialogue you need to "
        "test:\nInput dialogue: {context} {slot_info}{pvl} {query}";
    t.remote_multi_demo_input =
        "The example is: Input dialogue: {demo_context}\nOutput result: {demo_multi_answer}\n"
        "And you need to test this example:\nInput dialogue: {context}\nPlease return the value "
        "of slot list [{slot_list}].";

    t.demo_context =
        "[USER] I need train reservations from norwich to cambridge [SYSTEM] I have 133 trains "
        "matching your request.";
    t.demo_slot = "train-departure";
    t.demo_answer = "Norwich";
    t.demo_multi_answer = "Train-Departure: Norwich, Train-Arrival: Cambridge";
    return t;
}

TemplateSet TemplateSet::compact() {
    TemplateSet t = defaults();
    t.standard_instruction = "Track the dialogue state.";
    t.customized_instruction = "Track the state of slot <{slot_id}>.";
    t.description_section = "{seg_domain} {domain} {seg_slot} {slot}, {slot_description}.";
    t.query_section = "So <{slot_id}> is";
    return t;
}

namespace {

using Field = std::string TemplateSet::*;

const std::vector<std::pair<std::string, Field>>& template_fields() {
    static const std::vector<std::pair<std::string, Field>> fields = {
        {"seg_system", &TemplateSet::seg_system},
        {"seg_user", &TemplateSet::seg_user},
        {"seg_domain", &TemplateSet::seg_domain},
        {"seg_slot", &TemplateSet::seg_slot},
        {"seg_pvl", &TemplateSet::seg_pvl},
        {"standard_instruction", &TemplateSet::standard_instruction},
        {"customized_instruction", &TemplateSet::customized_instruction},
        {"fixed_instruction", &TemplateSet::fixed_instruction},
        {"description_section", &TemplateSet::description_section},
        {"pvl_section", &TemplateSet::pvl_section},
        {"query_section", &TemplateSet::query_section},
        {"remote_single_instruction", &TemplateSet::remote_single_instruction},
        {"remote_multi_instruction", &TemplateSet::remote_multi_instruction},
        {"remote_single_demo_instruction", &TemplateSet::remote_single_demo_instruction},
        {"remote_multi_demo_instruction", &TemplateSet::remote_multi_demo_instruction},
        {"remote_slot_info", &TemplateSet::remote_slot_info},
        {"remote_pvl", &TemplateSet::remote_pvl},
        {"remote_query", &TemplateSet::remote_query},
        {"remote_single_input", &TemplateSet::remote_single_input},
        {"remote_multi_input", &TemplateSet::remote_multi_input},
        {"remote_single_demo_input", &TemplateSet::remote_single_demo_input},
        {"remote_multi_demo_input", &TemplateSet::remote_multi_demo_input},
        {"demo_context", &TemplateSet::demo_context},
        {"demo_slot", &TemplateSet::demo_slot},
        {"demo_answer", &TemplateSet::demo_answer},
        {"demo_multi_answer", &TemplateSet::demo_multi_answer},
    };
    return fields;
}

bool is_ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

std::map<std::string, std::string> segment_vars(const TemplateSet& t) {
    return {{"seg_system", t.seg_system},
            {"seg_user", t.seg_user},
            {"seg_domain", t.seg_domain},
            {"seg_slot", t.seg_slot},
            {"seg_pvl", t.seg_pvl}};
}

std::map<std::string, std::string> slot_vars(const TemplateSet& t, const SlotSpec& slot) {
    auto vars = segment_vars(t);
    vars["domain"] = slot.domain;
    vars["slot"] = slot.name;
    vars["slot_id"] = slot.id();
    vars["slot_display"] = slot.display_id();
    vars["domain_description"] = slot.domain_description;
    vars["slot_description"] = slot.description;
    vars["values"] = join(slot.possible_values, ", ");
    return vars;
}

}  // namespace

std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tmpl.size() + 64);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        const char c = tmpl[i];
        if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
            out += '{';
            i += 2;
            continue;
        }
        if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
            out += '}';
            i += 2;
            continue;
        }
        if (c == '{') {
            std::size_t j = i + 1;
            while (j < tmpl.size() && is_ident_char(tmpl[j])) {
                ++j;
            }
            if (j > i + 1 && j < tmpl.size() && tmpl[j] == '}') {
                const std::string name(tmpl.substr(i + 1, j - i - 1));
                const auto it = vars.find(name);
                if (it == vars.end()) {
                    throw DataError("unresolved template placeholder {" + name + "}");
                }
                out += it->second;
                i = j + 1;
                continue;
            }
        }
        out += c;
        ++i;
    }
    return out;
}

TemplateSet TemplateSet::parse(std::string_view text, const TemplateSet& base) {
    TemplateSet t = base;
    Field current = nullptr;
    std::string body;
    auto flush = [&] {
        if (current != nullptr) {
            while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) {
                body.pop_back();
            }
            t.*current = body;
        }
        body.clear();
    };
    for (const std::string& raw : split(text, '\n')) {
        std::string line = raw;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.size() > 1 && line[0] == '@' &&
            std::all_of(line.begin() + 1, line.end(), is_ident_char)) {
            flush();
            const std::string name = line.substr(1);
            const auto& fields = template_fields();
            const auto it = std::find_if(fields.begin(), fields.end(),
                                         [&](const auto& f) { return f.first == name; });
            if (it == fields.end()) {
                throw DataError("unknown template section @" + name);
            }
            current = it->second;
            continue;
        }
        if (current == nullptr) {
            if (!trim(line).empty() && line[0] != '#') {
                throw DataError("template text outside of a @section: " + line);
            }
            continue;
        }
        body += line;
        body += '\n';
    }
    flush();
    t.validate();
    return t;
}

std::string TemplateSet::serialize() const {
    std::string out = "# dstkit template set\n";
    for (const auto& [name, field] : template_fields()) {
        out += "\n@" + name + "\n" + this->*field + "\n";
    }
    return out;
}

void TemplateSet::validate() const {
    for (const auto& [name, field] : {std::pair<const char*, Field>{"seg_system", &TemplateSet::seg_system},
                                      {"seg_user", &TemplateSet::seg_user},
                                      {"seg_domain", &TemplateSet::seg_domain},
                                      {"seg_slot", &TemplateSet::seg_slot},
                                      {"seg_pvl", &TemplateSet::seg_pvl}}) {
        if ((this->*field).empty()) {
            throw DataError(std::string("segment token ") + name + " must be non-empty");
        }
    }
    SlotSpec probe{"domain", "slot", "slot description", "domain description", true, {"a", "b"}};
    auto vars = slot_vars(*this, probe);
    for (const char* extra : {"context", "slot_info", "pvl", "query", "slot_list", "demo_context",
                              "demo_slot", "demo_answer", "demo_multi_answer"}) {
        vars[extra] = "x";
    }
    for (const auto& [name, field] : template_fields()) {
        try {
            (void)render_template(this->*field, vars);
        } catch (const DataError& e) {
            throw DataError("template @" + name + ": " + e.what());
        }
    }
}

void AssemblyPolicy::validate() const {
    for (double p : {p_description, p_pvl, p_customized}) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("assembly probabilities must lie in [0, 1]");
        }
    }
}

std::string PromptVariant::label() const {
    std::string s = to_string(instruction);
    s += description ? "+desc" : "";
    s += pvl ? "+pvl" : "";
    return s;
}

std::vector<PromptVariant> sensitivity_variants() {
    std::vector<PromptVariant> out;
    for (InstructionKind kind : {InstructionKind::standard, InstructionKind::customized}) {
        out.push_back({kind, true, true});
        out.push_back({kind, true, false});
        out.push_back({kind, false, false});
    }
    return out;
}

// ---- samples ------------------------------------------------------------------

namespace {

std::string render_turn(const Turn& turn, const TemplateSet& t) {
    std::string out;
    if (!trim(turn.system_utterance).empty()) {
        out += t.seg_system;
        out += ' ';
        out += turn.system_utterance;
        out += ' ';
    }
    out += t.seg_user;
    out += ' ';
    out += turn.user_utterance;
    return out;
}

std::string join_nonempty(const std::vector<std::string>& parts) {
    std::string out;
    for (const std::string& p : parts) {
        if (p.empty()) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += p;
    }
    return out;
}

void compose_input(InstructionSample& s) {
    std::vector<std::string> parts = s.layout->turns;
    parts.insert(parts.end(), s.layout->sections.begin(), s.layout->sections.end());
    s.input = join_nonempty(parts);
}

}  // namespace

std::string render_context(std::span<const Turn> turns, const TemplateSet& templates) {
    std::vector<std::string> parts;
    parts.reserve(turns.size());
    for (const Turn& t : turns) {
        parts.push_back(render_turn(t, templates));
    }
    return join_nonempty(parts);
}

InstructionSample build_sample(const Dialogue& dialogue, std::size_t turn_index,
                               const SlotSpec& slot, const Schema& schema,
                               const TemplateSet& templates, const PromptVariant& variant) {
    if (turn_index < 1 || turn_index > dialogue.num_turns()) {
        throw std::out_of_range("turn index " + std::to_string(turn_index) +
                                " outside 1.." + std::to_string(dialogue.num_turns()) +
                                " for dialogue " + dialogue.id);
    }
    const auto vars = slot_vars(templates, slot);

    InstructionSample s;
    switch (variant.instruction) {
        case InstructionKind::standard:
            s.instruction = render_template(templates.standard_instruction, vars);
            break;
        case InstructionKind::customized:
            s.instruction = render_template(templates.customized_instruction, vars);
            break;
        case InstructionKind::fixed:
            s.instruction = render_template(templates.fixed_instruction, vars);
            break;
    }

    InputLayout layout;
    for (std::size_t t = 0; t < turn_index; ++t) {
        layout.turns.push_back(render_turn(dialogue.turns[t], templates));
    }
    const bool with_pvl = variant.pvl && slot.is_categorical;
    if (variant.description) {
        layout.sections.push_back(render_template(templates.description_section, vars));
    }
    if (with_pvl) {
        layout.sections.push_back(render_template(templates.pvl_section, vars));
    }
    layout.sections.push_back(render_template(templates.query_section, vars));
    s.layout = std::move(layout);
    compose_input(s);

    s.output = dialogue.gold_states[turn_index - 1].get(schema, slot.id()).render();
    s.meta = SampleMeta{dialogue.id, turn_index, slot.id(), variant.description, with_pvl,
                        variant.instruction};
    return s;
}

InstructionSample assemble_sample(const Dialogue& dialogue, std::size_t turn_index,
                                  const SlotSpec& slot, const Schema& schema,
                                  const TemplateSet& templates, const AssemblyPolicy& policy) {
    SplitMix64 rng(keyed_seed(policy.seed,
                              {dialogue.id, std::to_string(turn_index), slot.id()}));
    PromptVariant variant;
    variant.instruction =
        rng.coin(policy.p_customized) ? InstructionKind::customized : InstructionKind::standard;
    variant.description = rng.coin(policy.p_description);
    variant.pvl = rng.coin(policy.p_pvl);
    return build_sample(dialogue, turn_index, slot, schema, templates, variant);
}

InstructionSample fixed_sample(const Dialogue& dialogue, std::size_t turn_index,
                               const SlotSpec& slot, const Schema& schema,
                               const TemplateSet& templates) {
    return build_sample(dialogue, turn_index, slot, schema, templates,
                        PromptVariant{InstructionKind::fixed, true, true});
}

namespace {

template <class MakeSample>
std::vector<InstructionSample> generate(std::span<const Dialogue> corpus, const Schema& schema,
                                        unsigned workers, MakeSample make) {
    std::vector<std::size_t> offsets(corpus.size() + 1, 0);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        offsets[i + 1] = offsets[i] + corpus[i].num_turns() * schema.size();
    }
    std::vector<InstructionSample> out(offsets.back());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t di = begin; di < end; ++di) {
            std::size_t k = offsets[di];
            for (std::size_t t = 1; t <= corpus[di].num_turns(); ++t) {
                for (const SlotSpec& slot : schema.slots()) {
                    out[k++] = make(corpus[di], t, slot);
                }
            }
        }
    };
    const std::size_t n_workers =
        std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, corpus.size()));
    if (n_workers == 1) {
        work(0, corpus.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (corpus.size() + n_workers - 1) / n_workers;
        for (std::size_t w = 0; w < n_workers; ++w) {
            const std::size_t b = w * chunk;
            const std::size_t e = std::min(corpus.size(), b + chunk);
            if (b < e) {
                pool.emplace_back(work, b, e);
            }
        }
    }
    return out;
}

}  // namespace

std::vector<InstructionSample> generate_instruction_dataset(std::span<const Dialogue> corpus,
                                                            const Schema& schema,
                                                            const TemplateSet& templates,
                                                            const AssemblyPolicy& policy,
                                                            DatasetMode mode, unsigned workers) {
    policy.validate();
    if (mode == DatasetMode::fixed) {
        return generate(corpus, schema, workers, [&](const Dialogue& d, std::size_t t,
                                                     const SlotSpec& s) {
            return fixed_sample(d, t, s, schema, templates);
        });
    }
    return generate(corpus, schema, workers,
                    [&](const Dialogue& d, std::size_t t, const SlotSpec& s) {
                        return assemble_sample(d, t, s, schema, templates, policy);
                    });
}

std::vector<InstructionSample> generate_variant_dataset(std::span<const Dialogue> corpus,
                                                        const Schema& schema,
                                                        const TemplateSet& templates,
                                                        const PromptVariant& variant) {
    return generate(corpus, schema, 1, [&](const Dialogue& d, std::size_t t, const SlotSpec& s) {
        return build_sample(d, t, s, schema, templates, variant);
    });
}

std::string prompt_text(const InstructionSample& sample) {
    std::string out = sample.instruction;
    out += '\n';
    out += sample.input;
    out += '\n';
    return out;
}

std::size_t sequence_length(const InstructionSample& sample, const Tokenizer& tokenizer) {
    return 2 + tokenizer.count(prompt_text(sample)) + tokenizer.count(sample.output);
}

InstructionSample truncate_to_budget(const InstructionSample& sample, std::size_t budget,
                                     const Tokenizer& tokenizer) {
    if (budget == 0) {
        throw std::invalid_argument("truncation budget must be positive");
    }
    if (sequence_length(sample, tokenizer) <= budget) {
        return sample;
    }
    if (!sample.layout) {
        throw DataError("sample " + sample.meta.dialogue_id + "/" +
                        std::to_string(sample.meta.turn_index) + "/" + sample.meta.slot_id +
                        " exceeds the budget and has no layout to truncate");
    }
    InstructionSample out = sample;
    auto& turns = out.layout->turns;
    InstructionSample bare = out;
    bare.layout->turns.clear();
    compose_input(bare);
    if (sequence_length(bare, tokenizer) > budget) {
        throw std::invalid_argument("budget of " + std::to_string(budget) +
                                    " tokens cannot hold the instruction, slot sections and output");
    }
    // Binary search the number of oldest turns to drop; length is monotone in it.
    std::size_t lo = 1;
    std::size_t hi = turns.size();
    while (lo < hi) {
        const std::size_t mid = (lo + hi) / 2;
        InstructionSample probe = sample;
        probe.layout->turns.erase(probe.layout->turns.begin(),
                                  probe.layout->turns.begin() + static_cast<std::ptrdiff_t>(mid));
        compose_input(probe);
        if (sequence_length(probe, tokenizer) <= budget) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    turns.erase(turns.begin(), turns.begin() + static_cast<std::ptrdiff_t>(lo));
    compose_input(out);
    return out;
}

// ---- remote prompts -------------------------------------------------------------

std::string to_string(RemoteMode mode) {
    switch (mode) {
        case RemoteMode::single_no_demo:
            return "single_no_demo";
        case RemoteMode::multi_no_demo:
            return "multi_no_demo";
        case RemoteMode::single_one_demo:
            return "single_one_demo";
        case RemoteMode::multi_one_demo:
            return "multi_one_demo";
    }
    return "single_no_demo";
}

RemoteMode remote_mode_from_string(std::string_view name) {
    for (RemoteMode m : {RemoteMode::single_no_demo, RemoteMode::multi_no_demo,
                         RemoteMode::single_one_demo, RemoteMode::multi_one_demo}) {
        if (to_string(m) == name) {
            return m;
        }
    }
    throw std::invalid_argument("unknown prompt mode: " + std::string(name));
}

bool is_single(RemoteMode mode) noexcept {
    return mode == RemoteMode::single_no_demo || mode == RemoteMode::single_one_demo;
}

bool uses_demo(RemoteMode mode) noexcept {
    return mode == RemoteMode::single_one_demo || mode == RemoteMode::multi_one_demo;
}

DemoExemplar DemoExemplar::from_templates(const TemplateSet& templates) {
    return {templates.demo_context, templates.demo_slot, templates.demo_answer,
            templates.demo_multi_answer};
}

std::string remote_prompt(RemoteMode mode, std::string_view context,
                          std::span<const SlotSpec> slots, const TemplateSet& templates,
                          const DemoExemplar* demo) {
    if (is_single(mode) && slots.size() != 1) {
        throw std::invalid_argument(to_string(mode) + " takes exactly one slot, got " +
                                    std::to_string(slots.size()));
    }
    if (!is_single(mode) && slots.empty()) {
        throw std::invalid_argument(to_string(mode) + " needs the slot list to enumerate");
    }
    if (uses_demo(mode) && demo == nullptr) {
        throw std::invalid_argument(to_string(mode) + " requires a demo exemplar");
    }
    if (!uses_demo(mode) && demo != nullptr) {
        throw std::invalid_argument(to_string(mode) + " does not take a demo exemplar");
    }

    std::map<std::string, std::string> vars;
    if (is_single(mode)) {
        vars = slot_vars(templates, slots.front());
        vars["slot_info"] = render_template(templates.remote_slot_info, vars);
        vars["pvl"] = slots.front().is_categorical ? render_template(templates.remote_pvl, vars)
                                                   : std::string();
        vars["query"] = render_template(templates.remote_query, vars);
    } else {
        vars = segment_vars(templates);
        std::vector<std::string> ids;
        ids.reserve(slots.size());
        for (const SlotSpec& s : slots) {
            ids.push_back(s.id());
        }
        vars["slot_list"] = join(ids, ", ");
    }
    vars["context"] = std::string(context);
    if (demo != nullptr) {
        vars["demo_context"] = demo->context;
        vars["demo_slot"] = demo->slot;
        vars["demo_answer"] = demo->answer;
        vars["demo_multi_answer"] = demo->multi_answer;
    }

    const std::string* instruction = nullptr;
    const std::string* input = nullptr;
    switch (mode) {
        case RemoteMode::single_no_demo:
            instruction = &templates.remote_single_instruction;
            input = &templates.remote_single_input;
            break;
        case RemoteMode::multi_no_demo:
            instruction = &templates.remote_multi_instruction;
            input = &templates.remote_multi_input;
            break;
        case RemoteMode::single_one_demo:
            instruction = &templates.remote_single_demo_instruction;
            input = &templates.remote_single_demo_input;
            break;
        case RemoteMode::multi_one_demo:
            instruction = &templates.remote_multi_demo_instruction;
            input = &templates.remote_multi_demo_input;
            break;
    }
    return render_template(*instruction, vars) + "\n" + render_template(*input, vars);
}

// ---- dataset file -------------------------------------------------------------------

std::string sample_to_json(const InstructionSample& sample) {
    ordered_json rec;
    rec["instruction"] = sample.instruction;
    rec["input"] = sample.input;
    rec["output"] = sample.output;
    ordered_json meta;
    meta["dialogue_id"] = sample.meta.dialogue_id;
    meta["turn_index"] = sample.meta.turn_index;
    meta["slot_id"] = sample.meta.slot_id;
    meta["included_description"] = sample.meta.included_description;
    meta["included_pvl"] = sample.meta.included_pvl;
    meta["instruction_template"] = to_string(sample.meta.instruction_template);
    rec["meta"] = std::move(meta);
    return rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

InstructionSample sample_from_json(std::string_view line) {
    json rec;
    try {
        rec = json::parse(line);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("malformed instruction record: ") + e.what());
    }
    InstructionSample s;
    try {
        s.instruction = rec.at("instruction").get<std::string>();
        s.input = rec.at("input").get<std::string>();
        s.output = rec.at("output").get<std::string>();
        const json& meta = rec.at("meta");
        s.meta.dialogue_id = meta.at("dialogue_id").get<std::string>();
        s.meta.turn_index = meta.at("turn_index").get<std::size_t>();
        s.meta.slot_id = meta.at("slot_id").get<std::string>();
        s.meta.included_description = meta.value("included_description", false);
        s.meta.included_pvl = meta.value("included_pvl", false);
        s.meta.instruction_template =
            instruction_kind_from_string(meta.value("instruction_template", "standard"));
    } catch (const json::exception& e) {
        throw DataError(std::string("invalid instruction record: ") + e.what());
    }
    return s;
}

std::string samples_to_jsonl(std::span<const InstructionSample> samples) {
    std::string out;
    for (const InstructionSample& s : samples) {
        out += sample_to_json(s);
        out += '\n';
    }
    return out;
}

std::vector<InstructionSample> samples_from_jsonl(std::string_view document) {
    std::vector<InstructionSample> out;
    for (const std::string& line : split(document, '\n')) {
        if (!trim(line).empty()) {
            out.push_back(sample_from_json(line));
        }
    }
    return out;
}

}  // namespace dstkit
