#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "dstkit/cli.hpp"
#include "dstkit/corpus.hpp"
#include "dstkit/gateway.hpp"
#include "dstkit/lora.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/prompt.hpp"

namespace py = pybind11;
using namespace dstkit;

namespace {

py::dict param_count(std::int64_t n_layers, std::int64_t n_modules, std::int64_t rank, std::int64_t d_in,
                     std::int64_t d_out, std::int64_t base_total) {
    const ParamCount c = count_lora_params(n_layers, n_modules, rank, d_in, d_out, base_total);
    py::dict d;
    d["trainable"] = c.trainable;
    d["total"] = c.total;
    d["ratio"] = c.ratio;
    return d;
}

py::tuple synth(int n_dialogues, int n_domains, int slots_per_domain, int max_turns, double categorical_ratio,
                std::uint64_t seed, unsigned workers) {
    SynthCorpus c = synth_corpus({n_dialogues, n_domains, slots_per_domain, max_turns, categorical_ratio}, seed, workers);
    return py::make_tuple(schema_to_json(c.schema), dialogues_to_jsonl(c.dialogues, c.schema));
}

std::string instructions(const std::string& schema_json, const std::string& dialogues_jsonl, std::uint64_t seed,
                         const std::string& mode, double p_description, double p_pvl, bool compact, unsigned workers) {
    if (mode != "assembled" && mode != "fixed") throw std::invalid_argument("mode must be 'assembled' or 'fixed'");
    const Schema schema = load_schema(schema_json);
    const auto dialogues = load_dialogues(dialogues_jsonl, schema, true);
    AssemblyPolicy policy{p_description, p_pvl, 0.5, seed};
    const auto samples = generate_instruction_dataset(dialogues, schema,
                                                      compact ? TemplateSet::compact() : TemplateSet::defaults(),
                                                      policy, mode == "fixed" ? DatasetMode::fixed : DatasetMode::assembled,
                                                      workers);
    return samples_to_jsonl(samples);
}

std::string evaluate_files(const std::string& schema_json, const std::string& gold_jsonl,
                           const std::string& predictions_jsonl, const std::string& policy, const std::string& aga) {
    const Schema schema = load_schema(schema_json);
    const auto gold = load_dialogues(gold_jsonl, schema, false);
    EvalOptions o;
    o.policy = match_policy_from_string(policy);
    if (aga == "macro") {
        o.aga_mode = AgaMode::macro;
    } else if (aga != "micro") {
        throw std::invalid_argument("aga must be 'micro' or 'macro'");
    }
    return report_to_json(evaluate(load_predictions(predictions_jsonl), gold, schema, o));
}

py::tuple run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dstkit");
    std::ostringstream out, err;
    int code = 0;
    {
        py::gil_scoped_release release;
        code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.attr("__version__") = DSTKIT_VERSION;

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

    m.def("count_lora_params", &param_count, py::arg("n_layers"), py::arg("n_modules"), py::arg("rank"),
          py::arg("d_in"), py::arg("d_out"), py::arg("base_total"));
    m.def("synth", &synth, py::arg("n_dialogues") = 200, py::arg("n_domains") = 3, py::arg("slots_per_domain") = 4,
          py::arg("max_turns") = 8, py::arg("categorical_ratio") = 0.5, py::arg("seed") = 0, py::arg("workers") = 1,
          "Synthetic corpus as (schema JSON, dialogues JSONL).");
    m.def("generate_instructions", &instructions, py::arg("schema_json"), py::arg("dialogues_jsonl"),
          py::arg("seed") = 0, py::arg("mode") = "assembled", py::arg("p_description") = 0.5, py::arg("p_pvl") = 0.5,
          py::arg("compact") = false, py::arg("workers") = 1);
    m.def("evaluate", &evaluate_files, py::arg("schema_json"), py::arg("gold_jsonl"), py::arg("predictions_jsonl"),
          py::arg("policy") = "exact", py::arg("aga") = "micro", "Report JSON for a prediction file.");
    m.def("normalize_value", [](const std::string& text, const std::string& policy) {
        return normalize_value(text, match_policy_from_string(policy));
    }, py::arg("text"), py::arg("policy") = "exact");
    m.def("cache_key", &cache_key, py::arg("model"), py::arg("prompt"), py::arg("temperature") = 0.0);
    m.def("run_cli", &run_cli, py::arg("args"), "Runs the command-line tool in process: (exit code, stdout, stderr).");
}
