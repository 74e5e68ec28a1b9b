#include "dstkit/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dstkit/checkpoint.hpp"
#include "dstkit/convert.hpp"
#include "dstkit/corpus.hpp"
#include "dstkit/errors.hpp"
#include "dstkit/gateway.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/pipeline.hpp"
#include "dstkit/plots.hpp"
#include "dstkit/prompt.hpp"
#include "dstkit/strings.hpp"
#include "dstkit/train.hpp"

#ifndef DSTKIT_VERSION
#define DSTKIT_VERSION "0.0.0"
#endif

namespace dstkit::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Collects what a run read and wrote, then lands beside the outputs.
class Manifest {
public:
    Manifest(const CLI::App& sub, std::vector<std::string> argv)
        : sub_(sub), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()),
          started_at_(utc_now()) {}

    void input(const std::string& path) { inputs_.push_back(path); }
    void output(const std::string& path) { outputs_.push_back(path); }
    void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }
    void note(const std::string& key, ordered_json value) { extra_[key] = std::move(value); }

    void write(const std::string& path) const {
        ordered_json doc;
        doc["subcommand"] = sub_.get_name();
        doc["toolkit_version"] = DSTKIT_VERSION;
        doc["argv"] = argv_;
        doc["resolved_config"] = "[" + sub_.get_name() + "]\n" + sub_.config_to_str(true, false);
        doc["seeds"] = seeds_;
        doc["inputs"] = inputs_;
        doc["outputs"] = outputs_;
        for (const auto& [k, v] : extra_.items()) doc[k] = v;
        doc["started_at"] = started_at_;
        doc["wall_clock_s"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file(path, doc.dump(2) + "\n");
    }

private:
    const CLI::App& sub_;
    std::vector<std::string> argv_;
    std::chrono::steady_clock::time_point start_;
    std::string started_at_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
    ordered_json seeds_ = ordered_json::object();
    ordered_json extra_ = ordered_json::object();
};

std::string in_dir(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

std::string beside(const std::string& file) { return file + ".manifest.json"; }

Schema read_schema(const std::string& path) { return load_schema(read_file(path)); }

std::vector<Dialogue> read_dialogues(const std::string& path, const Schema& schema, bool strict,
                                     unsigned workers, std::ostream& err) {
    Warnings w;
    auto d = load_dialogues(read_file(path), schema, strict, &w, workers);
    for (const auto& line : w) err << "warning: " << line << '\n';
    return d;
}

TemplateSet read_templates(const std::string& path, bool compact) {
    const TemplateSet base = compact ? TemplateSet::compact() : TemplateSet::defaults();
    if (path.empty()) return base;
    TemplateSet t = TemplateSet::parse(read_file(path), base);
    t.validate();
    return t;
}

PromptVariant parse_variant(const std::string& label) {
    const auto parts = split(label, '+');
    PromptVariant v;
    v.instruction = instruction_kind_from_string(parts.at(0));
    v.description = false;
    v.pvl = false;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (parts[i] == "desc") {
            v.description = true;
        } else if (parts[i] == "pvl") {
            v.pvl = true;
        } else {
            throw UsageError("unknown prompt part '" + parts[i] + "' in " + label);
        }
    }
    return v;
}

std::vector<Projection> parse_targets(const std::string& text) {
    std::vector<Projection> out;
    for (const std::string& p : split(text, ',')) {
        try {
            out.push_back(projection_from_string(std::string(trim(p))));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    return out;
}

struct ModelFlags {
    int d_model = 64;
    int layers = 2;
    int heads = 4;
    int context = 256;
    int mlp_ratio = 4;
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
    std::string targets = "q,k,v,o";
};

void add_model_flags(CLI::App* app, ModelFlags& f, bool architecture, bool lora) {
    if (architecture) {
        app->add_option("--d-model", f.d_model, "Model width")->capture_default_str();
        app->add_option("--layers", f.layers, "Decoder blocks")->capture_default_str();
        app->add_option("--heads", f.heads, "Attention heads")->capture_default_str();
        app->add_option("--context", f.context, "Context length in tokens")->capture_default_str();
        app->add_option("--mlp-ratio", f.mlp_ratio, "MLP width multiplier")->capture_default_str();
    }
    if (lora) {
        app->add_option("--rank", f.rank, "LoRA rank r")->capture_default_str();
        app->add_option("--alpha", f.alpha, "LoRA alpha (scaling = alpha / r)")->capture_default_str();
        app->add_option("--dropout", f.dropout, "Adapter input dropout")->capture_default_str();
        app->add_option("--targets", f.targets, "Adapted projections, comma separated")
            ->capture_default_str();
    }
}

ToyDecoderConfig model_config(const ModelFlags& f, int vocab) {
    ToyDecoderConfig c;
    c.vocab_size = vocab;
    c.model_dim = f.d_model;
    c.n_layers = f.layers;
    c.n_heads = f.heads;
    c.context_len = f.context;
    c.mlp_ratio = f.mlp_ratio;
    c.lora = {f.rank, f.alpha, f.dropout};
    c.target_modules = parse_targets(f.targets);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

struct TrainFlags {
    double lr = 1e-4;
    int batch = 16;
    int epochs = 1;
    long max_steps = 0;
    double max_grad_norm = 1.0;
    double warmup = 0.0;
    bool linear_decay = false;
    std::string loss_trace;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
    app->add_option("--lr", f.lr, "Learning rate")->capture_default_str();
    app->add_option("--batch-size", f.batch, "Sequences per step")->capture_default_str();
    app->add_option("--epochs", f.epochs, "Passes over the data")->capture_default_str();
    app->add_option("--max-steps", f.max_steps, "Stop after this many steps (0: no limit)")
        ->capture_default_str();
    app->add_option("--max-grad-norm", f.max_grad_norm, "Global gradient clip (0: off)")
        ->capture_default_str();
    app->add_option("--warmup", f.warmup, "Linear warmup share of the steps")->capture_default_str();
    app->add_flag("--linear-decay", f.linear_decay, "Decay the rate linearly to zero after warmup");
    app->add_option("--loss-trace", f.loss_trace, "Write the per-step loss table here");
}

TrainConfig train_config(const TrainFlags& f, std::uint64_t seed) {
    TrainConfig c;
    c.learning_rate = f.lr;
    c.batch_size = f.batch;
    c.epochs = f.epochs;
    c.max_steps = f.max_steps;
    c.max_grad_norm = f.max_grad_norm;
    c.warmup_fraction = f.warmup;
    c.linear_decay = f.linear_decay;
    c.seed = seed;
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

void print_report(std::ostream& out, const EvalReport& r, bool errors, std::size_t top_k) {
    out << "jga\t" << r.jga << '\n';
    out << "aga\t" << (r.aga ? std::to_string(*r.aga) : std::string("undefined")) << '\n';
    out << "turns\t" << r.n_turns << '\n';
    out << "active_slot_instances\t" << r.n_active_slot_instances << '\n';
    if (errors) {
        for (ErrorCategory c : kErrorCategories) out << "errors." << to_string(c) << '\t' << r.errors.count(c) << '\n';
        for (const auto& s : r.errors.top(top_k)) out << "top_slot\t" << s.slot_id << '\t' << s.count << '\n';
    }
}

struct Common {
    std::uint64_t seed = 0;
    unsigned workers = 1;
    bool quiet = false;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"dstkit: dialogue state tracking with assembled instructions and LoRA", "dstkit"};
    app.set_version_flag("--version", DSTKIT_VERSION);
    app.set_config("--config", "", "Read option values from a TOML/INI file (flags override it)");
    app.require_subcommand(1);
    app.fallthrough(false);

    Common common;
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
    auto log = [&](const std::string& msg) {
        if (!quiet) err << msg << '\n';
    };
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", common.seed, "Root seed; every random choice derives from it")
            ->capture_default_str();
    };
    auto add_workers = [&](CLI::App* sub) {
        sub->add_option("--workers", common.workers, "Worker threads")
            ->capture_default_str()
            ->check(CLI::Range(1u, 256u));
    };

    // ---- convert ----------------------------------------------------------------
    struct ConvertOpts {
        std::string from;
        std::string schema;
        std::vector<std::string> dialogues;
        std::string out_dir;
    } conv;
    auto add_convert = [&](const std::string& name, const std::string& fixed_from) {
        CLI::App* sub = app.add_subcommand(name, fixed_from.empty()
                                                     ? "Convert an SGD or MultiWOZ 2.2 corpus to canonical files"
                                                     : "Convert a " + fixed_from + " corpus to canonical files");
        if (fixed_from.empty()) {
            sub->add_option("--from", conv.from, "Source layout")
                ->required()
                ->check(CLI::IsMember({"sgd", "multiwoz"}));
        }
        sub->add_option("--schema", conv.schema, "Native schema.json")->required()->check(CLI::ExistingFile);
        sub->add_option("--dialogues", conv.dialogues, "Native dialogue files")->required()->check(CLI::ExistingFile);
        sub->add_option("--out-dir", conv.out_dir, "Output directory")->required();
        sub->callback([&, sub, fixed_from] {
            Manifest m(*sub, args);
            const SourceFormat fmt = source_format_from_string(fixed_from.empty() ? conv.from : fixed_from);
            std::vector<std::string> docs;
            for (const auto& p : conv.dialogues) {
                docs.push_back(read_file(p));
                m.input(p);
            }
            m.input(conv.schema);
            ConvertResult r = convert_corpus(fmt, read_file(conv.schema), docs);
            for (const auto& w : r.warnings) err << "warning: " << w << '\n';
            const auto schema_path = in_dir(conv.out_dir, "schema.json");
            const auto dlg_path = in_dir(conv.out_dir, "dialogues.jsonl");
            write_file(schema_path, schema_to_json(r.schema));
            write_file(dlg_path, dialogues_to_jsonl(r.dialogues, r.schema));
            m.output(schema_path);
            m.output(dlg_path);
            m.note("warnings", r.warnings.size());
            m.write(in_dir(conv.out_dir, "manifest.json"));
            out << "converted " << r.dialogues.size() << " dialogues, " << r.schema.size() << " slots\n";
        });
    };
    add_convert("convert", "");
    add_convert("from-sgd", "sgd");
    add_convert("from-multiwoz", "multiwoz");

    // ---- synth -------------------------------------------------------------------
    SynthConfig synth_cfg;
    std::string synth_out;
    {
        CLI::App* sub = app.add_subcommand("synth", "Generate a synthetic corpus and schema");
        sub->add_option("--out-dir", synth_out, "Output directory")->required();
        sub->add_option("--n-dialogues", synth_cfg.n_dialogues, "Dialogues")->capture_default_str();
        sub->add_option("--n-domains", synth_cfg.n_domains, "Domains")->capture_default_str();
        sub->add_option("--slots-per-domain", synth_cfg.slots_per_domain, "Slots per domain")->capture_default_str();
        sub->add_option("--max-turns", synth_cfg.max_turns, "Maximum turns per dialogue")->capture_default_str();
        sub->add_option("--categorical-ratio", synth_cfg.categorical_ratio, "Share of categorical slots")
            ->capture_default_str();
        add_seed(sub);
        add_workers(sub);
        sub->callback([&, sub] {
            try {
                synth_cfg.validate();
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            Manifest m(*sub, args);
            m.seed("seed", common.seed);
            const SynthCorpus c = synth_corpus(synth_cfg, common.seed, common.workers);
            const auto schema_path = in_dir(synth_out, "schema.json");
            const auto dlg_path = in_dir(synth_out, "dialogues.jsonl");
            write_file(schema_path, schema_to_json(c.schema));
            write_file(dlg_path, dialogues_to_jsonl(c.dialogues, c.schema));
            m.output(schema_path);
            m.output(dlg_path);
            m.write(in_dir(synth_out, "manifest.json"));
            out << "wrote " << c.dialogues.size() << " dialogues over " << c.schema.size() << " slots\n";
        });
    }

    // ---- split -------------------------------------------------------------------
    struct SplitOpts {
        std::string schema, dialogues, out_dir, zero_shot;
        double few_shot = -1.0;
        bool lenient = false;
    } sp;
    {
        CLI::App* sub = app.add_subcommand("split", "Few-shot or zero-shot train/eval split");
        sub->add_option("--schema", sp.schema, "Schema file")->required()->check(CLI::ExistingFile);
        sub->add_option("--dialogues", sp.dialogues, "Dialogue file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out-dir", sp.out_dir, "Output directory")->required();
        auto* fs_opt = sub->add_option("--few-shot", sp.few_shot, "Training fraction in [0, 1]");
        auto* zs_opt = sub->add_option("--zero-shot", sp.zero_shot, "Held-out domain");
        fs_opt->excludes(zs_opt);
        sub->add_flag("--lenient", sp.lenient, "Keep off-list categorical values with a warning");
        add_seed(sub);
        add_workers(sub);
        sub->callback([&, sub, fs_opt, zs_opt] {
            if (fs_opt->count() == 0 && zs_opt->count() == 0) {
                throw UsageError("split needs --few-shot F or --zero-shot DOMAIN");
            }
            Manifest m(*sub, args);
            const Schema schema = read_schema(sp.schema);
            const auto dialogues = read_dialogues(sp.dialogues, schema, !sp.lenient, common.workers, err);
            m.input(sp.schema);
            m.input(sp.dialogues);
            CorpusSplit split;
            if (fs_opt->count() > 0) {
                if (!(sp.few_shot >= 0.0 && sp.few_shot <= 1.0)) {
                    throw UsageError("--few-shot must lie in [0, 1]");
                }
                split = few_shot_split(dialogues, sp.few_shot, common.seed);
                m.seed("seed", common.seed);
            } else {
                split = zero_shot_split(dialogues, schema, sp.zero_shot);
            }
            auto ids = [](const std::vector<Dialogue>& v) {
                std::vector<std::string> out;
                for (const auto& d : v) out.push_back(d.id);
                return out;
            };
            ordered_json meta;
            meta["kind"] = split.provenance.kind;
            meta["seed"] = split.provenance.seed;
            meta["fraction"] = split.provenance.fraction;
            meta["holdout_domain"] = split.provenance.holdout_domain;
            meta["train_ids"] = ids(split.train);
            meta["eval_ids"] = ids(split.eval);
            meta["excluded_ids"] = ids(split.excluded);
            const std::vector<std::pair<std::string, std::string>> files = {
                {"train.jsonl", dialogues_to_jsonl(split.train, schema)},
                {"eval.jsonl", dialogues_to_jsonl(split.eval, schema)},
                {"split.json", meta.dump(2) + "\n"}};
            for (const auto& [name, body] : files) {
                write_file(in_dir(sp.out_dir, name), body);
                m.output(in_dir(sp.out_dir, name));
            }
            if (!split.excluded.empty()) {
                write_file(in_dir(sp.out_dir, "excluded.jsonl"), dialogues_to_jsonl(split.excluded, schema));
                m.output(in_dir(sp.out_dir, "excluded.jsonl"));
            }
            m.write(in_dir(sp.out_dir, "manifest.json"));
            out << "train " << split.train.size() << "\neval " << split.eval.size() << "\nexcluded "
                << split.excluded.size() << '\n';
        });
    }

    // ---- gen-instructions ------------------------------------------------------------
    struct GenOpts {
        std::string schema, dialogues, out, templates;
        bool assembled = false, fixed = false, compact = false, lenient = false;
        double p_description = 0.5, p_pvl = 0.5, p_customized = 0.5;
        std::size_t budget = 0;
    } gen;
    {
        CLI::App* sub = app.add_subcommand("gen-instructions", "Render instruction samples for every turn and slot");
        sub->add_option("--schema", gen.schema, "Schema file")->required()->check(CLI::ExistingFile);
        sub->add_option("--dialogues", gen.dialogues, "Dialogue file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", gen.out, "Output JSONL")->required();
        auto* a = sub->add_flag("--assembled", gen.assembled, "Randomized assembled templates (default)");
        auto* f = sub->add_flag("--fixed", gen.fixed, "Fixed-template baseline");
        a->excludes(f);
        sub->add_option("--templates", gen.templates, "Template file")->check(CLI::ExistingFile);
        sub->add_flag("--compact", gen.compact, "Start from the compact template set");
        sub->add_option("--p-description", gen.p_description, "Description inclusion probability")
            ->capture_default_str();
        sub->add_option("--p-pvl", gen.p_pvl, "Possible-value-list inclusion probability")->capture_default_str();
        sub->add_option("--p-customized", gen.p_customized, "Customized-instruction probability")
            ->capture_default_str();
        sub->add_option("--budget", gen.budget, "Token budget per sample, oldest turns dropped (0: none)")
            ->capture_default_str();
        sub->add_flag("--lenient", gen.lenient, "Keep off-list categorical values with a warning");
        add_seed(sub);
        add_workers(sub);
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            const Schema schema = read_schema(gen.schema);
            const auto dialogues = read_dialogues(gen.dialogues, schema, !gen.lenient, common.workers, err);
            const TemplateSet templates = read_templates(gen.templates, gen.compact);
            AssemblyPolicy policy{gen.p_description, gen.p_pvl, gen.p_customized, common.seed};
            try {
                policy.validate();
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            auto samples = generate_instruction_dataset(
                dialogues, schema, templates, policy,
                gen.fixed ? DatasetMode::fixed : DatasetMode::assembled, common.workers);
            if (gen.budget > 0) {
                const Tokenizer tok(templates.segment_tokens());
                for (auto& s : samples) s = truncate_to_budget(s, gen.budget, tok);
            }
            write_file(gen.out, samples_to_jsonl(samples));
            m.input(gen.schema);
            m.input(gen.dialogues);
            if (!gen.templates.empty()) m.input(gen.templates);
            m.output(gen.out);
            m.seed("seed", common.seed);
            m.note("samples", samples.size());
            m.write(beside(gen.out));
            out << "wrote " << samples.size() << " samples\n";
        });
    }

    // ---- train-toy ---------------------------------------------------------------------
    struct TrainOpts {
        std::string stage = "lora";
        std::string schema, dialogues, instructions, base, out, fused, templates;
        bool compact = false, loss_all = false, lenient = false;
    } tr;
    ModelFlags train_model;
    TrainFlags train_flags;
    {
        CLI::App* sub = app.add_subcommand("train-toy", "Pretrain the toy decoder or train LoRA adapters");
        sub->add_option("--stage", tr.stage, "pretrain (full network) or lora (adapters only)")
            ->capture_default_str()
            ->check(CLI::IsMember({"pretrain", "lora"}));
        sub->add_option("--schema", tr.schema, "Schema file (pretrain)")->check(CLI::ExistingFile);
        sub->add_option("--dialogues", tr.dialogues, "Pretraining dialogues (pretrain)")->check(CLI::ExistingFile);
        sub->add_option("--instructions", tr.instructions, "Instruction samples (lora)")->check(CLI::ExistingFile);
        sub->add_option("--base", tr.base, "Base checkpoint (lora)")->check(CLI::ExistingFile);
        sub->add_option("--out", tr.out, "Checkpoint (pretrain) or adapter file (lora)")->required();
        sub->add_option("--fused", tr.fused, "Also write base plus adapters as one checkpoint (lora)");
        sub->add_option("--templates", tr.templates, "Template file (segment tokens, pretraining layout)")
            ->check(CLI::ExistingFile);
        sub->add_flag("--compact", tr.compact, "Start from the compact template set");
        sub->add_flag("--loss-all", tr.loss_all, "Compute the loss on every token, not only the output");
        sub->add_flag("--lenient", tr.lenient, "Keep off-list categorical values with a warning");
        add_model_flags(sub, train_model, true, true);
        add_train_flags(sub, train_flags);
        add_seed(sub);
        add_workers(sub);
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            m.seed("seed", common.seed);
            TrainConfig tc = train_config(train_flags, common.seed);
            TrainResult result;
            auto on_step = [&](long step, double loss) {
                if (step % 50 == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
            };
            if (tr.stage == "pretrain") {
                if (tr.schema.empty() || tr.dialogues.empty()) {
                    throw UsageError("--stage pretrain needs --schema and --dialogues");
                }
                const Schema schema = read_schema(tr.schema);
                const auto dialogues = read_dialogues(tr.dialogues, schema, !tr.lenient, common.workers, err);
                const TemplateSet templates = read_templates(tr.templates, tr.compact);
                const Tokenizer tok(templates.segment_tokens());
                Model model(model_config(train_model, tok.vocab_size()), keyed_seed(common.seed, {"base-init"}));
                const auto seqs = pretraining_sequences(dialogues, schema, templates, tok, train_model.context,
                                                        keyed_seed(common.seed, {"pretrain-docs"}));
                tc.loss_on_output_only = false;
                result = train_sequences(model, seqs, tc, on_step);
                save_checkpoint(tr.out, model, tok);
                m.input(tr.schema);
                m.input(tr.dialogues);
            } else {
                if (tr.base.empty() || tr.instructions.empty()) {
                    throw UsageError("--stage lora needs --base and --instructions");
                }
                LoadedModel lm = load_checkpoint(tr.base);
                ToyDecoderConfig cfg = lm.model.config();
                const ToyDecoderConfig flags = model_config(train_model, cfg.vocab_size);
                cfg.lora = flags.lora;
                cfg.target_modules = flags.target_modules;
                try {
                    cfg.validate();
                } catch (const std::invalid_argument& e) {
                    throw UsageError(e.what());
                }
                Model model(cfg, 0);
                model.weights() = lm.model.weights();
                if (model.has_adapters()) model.merge_adapters();
                model.attach_adapters(keyed_seed(common.seed, {"adapter-init"}));
                const auto samples = samples_from_jsonl(read_file(tr.instructions));
                tc.loss_on_output_only = !tr.loss_all;
                result = train(model, samples, lm.tokenizer, tc, on_step);
                save_adapter(tr.out, model);
                if (!tr.fused.empty()) {
                    save_checkpoint(tr.fused, model, lm.tokenizer);
                    m.output(tr.fused);
                }
                m.input(tr.base);
                m.input(tr.instructions);
                const ParamCount pc = count_trainable(cfg);
                m.note("trainable_parameters", pc.trainable);
                m.note("trainable_ratio", pc.ratio);
            }
            m.output(tr.out);
            if (!train_flags.loss_trace.empty()) {
                write_file(train_flags.loss_trace, loss_trace_tsv(result.loss_trace));
                m.output(train_flags.loss_trace);
            }
            m.note("steps", result.steps);
            m.note("final_loss", result.loss_trace.empty() ? 0.0 : result.loss_trace.back());
            m.write(beside(tr.out));
            out << "steps\t" << result.steps << "\nfinal_loss\t"
                << (result.loss_trace.empty() ? 0.0 : result.loss_trace.back()) << '\n';
        });
    }

    // ---- predict ----------------------------------------------------------------------
    struct PredictOpts {
        std::string checkpoint, adapter, schema, dialogues, instructions, out, templates;
        std::string prompt = "standard+desc+pvl";
        bool compact = false, lenient = false;
        int max_new = 24;
    } pr;
    auto load_model = [&](const std::string& ckpt, const std::string& adapter) {
        LoadedModel lm = load_checkpoint(ckpt);
        if (!adapter.empty()) load_adapter(adapter, lm.model);
        return lm;
    };
    {
        CLI::App* sub = app.add_subcommand("predict", "Greedy slot-value predictions from a toy checkpoint");
        sub->add_option("--checkpoint", pr.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
        sub->add_option("--adapter", pr.adapter, "Standalone adapter file")->check(CLI::ExistingFile);
        sub->add_option("--schema", pr.schema, "Schema file")->check(CLI::ExistingFile);
        sub->add_option("--dialogues", pr.dialogues, "Dialogues to predict")->check(CLI::ExistingFile);
        sub->add_option("--instructions", pr.instructions, "Predict these samples instead")->check(CLI::ExistingFile);
        sub->add_option("--out", pr.out, "Predictions JSONL")->required();
        sub->add_option("--prompt", pr.prompt, "Prompt variant, e.g. standard+desc+pvl or customized")
            ->capture_default_str();
        sub->add_option("--templates", pr.templates, "Template file")->check(CLI::ExistingFile);
        sub->add_flag("--compact", pr.compact, "Start from the compact template set");
        sub->add_option("--max-new", pr.max_new, "Decode length cap")->capture_default_str();
        sub->add_flag("--lenient", pr.lenient, "Keep off-list categorical values with a warning");
        add_workers(sub);
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            LoadedModel lm = load_model(pr.checkpoint, pr.adapter);
            PredictOptions po{pr.max_new, common.workers};
            PredictionSet preds;
            if (!pr.instructions.empty()) {
                const auto samples = samples_from_jsonl(read_file(pr.instructions));
                preds = predict_samples(lm.model, lm.tokenizer, samples, po);
                preds.provenance = "instructions";
                m.input(pr.instructions);
            } else {
                if (pr.schema.empty() || pr.dialogues.empty()) {
                    throw UsageError("predict needs --instructions or --schema with --dialogues");
                }
                const Schema schema = read_schema(pr.schema);
                const auto dialogues = read_dialogues(pr.dialogues, schema, !pr.lenient, common.workers, err);
                const TemplateSet templates = read_templates(pr.templates, pr.compact);
                preds = predict_corpus(lm.model, lm.tokenizer, dialogues, schema, templates,
                                       parse_variant(pr.prompt), po);
                m.input(pr.schema);
                m.input(pr.dialogues);
            }
            write_file(pr.out, predictions_to_jsonl(preds));
            m.input(pr.checkpoint);
            if (!pr.adapter.empty()) m.input(pr.adapter);
            m.output(pr.out);
            m.write(beside(pr.out));
            out << "predicted " << preds.entries.size() << " slot values\n";
        });
    }

    // ---- eval ---------------------------------------------------------------------------
    struct EvalOpts {
        std::string schema, gold, predictions, out, per_turn_out;
        std::string policy = "exact", aga = "micro";
        bool per_turn = false, errors = false, lenient = false;
        std::size_t top_k = 5;
    } ev;
    {
        CLI::App* sub = app.add_subcommand("eval", "Score predictions: JGA, AGA, per-turn JGA, error taxonomy");
        sub->add_option("--schema", ev.schema, "Schema file")->required()->check(CLI::ExistingFile);
        sub->add_option("--gold", ev.gold, "Gold dialogues")->required()->check(CLI::ExistingFile);
        sub->add_option("--predictions", ev.predictions, "Predictions JSONL")->required()->check(CLI::ExistingFile);
        sub->add_option("--policy", ev.policy, "Value matching policy")
            ->capture_default_str()
            ->check(CLI::IsMember({"exact", "relaxed"}));
        sub->add_option("--aga", ev.aga, "AGA averaging")->capture_default_str()->check(CLI::IsMember({"micro", "macro"}));
        sub->add_flag("--per-turn", ev.per_turn, "Print and write the per-turn JGA table");
        sub->add_flag("--errors", ev.errors, "Print the error taxonomy and worst slots");
        sub->add_option("--top-k", ev.top_k, "Worst slots to list")->capture_default_str();
        sub->add_option("--out", ev.out, "Report JSON");
        sub->add_option("--per-turn-out", ev.per_turn_out, "Per-turn TSV (default: beside --out)");
        sub->add_flag("--strict", [&](std::int64_t) { ev.lenient = false; }, "Reject off-list categorical gold values");
        ev.lenient = true;
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            const Schema schema = read_schema(ev.schema);
            const auto gold = read_dialogues(ev.gold, schema, !ev.lenient, 1, err);
            const PredictionSet preds = load_predictions(read_file(ev.predictions));
            Warnings w;
            const EvalReport r = evaluate(preds, gold, schema,
                                          {match_policy_from_string(ev.policy),
                                           ev.aga == "macro" ? AgaMode::macro : AgaMode::micro},
                                          &w);
            for (const auto& line : w) err << "warning: " << line << '\n';
            print_report(out, r, ev.errors, ev.top_k);
            if (ev.per_turn) out << per_turn_tsv(r);
            m.input(ev.schema);
            m.input(ev.gold);
            m.input(ev.predictions);
            if (!ev.out.empty()) {
                write_file(ev.out, report_to_json(r, ev.top_k));
                m.output(ev.out);
                if (ev.per_turn || !ev.per_turn_out.empty()) {
                    const std::string p = ev.per_turn_out.empty() ? ev.out + ".per_turn.tsv" : ev.per_turn_out;
                    write_file(p, per_turn_tsv(r));
                    m.output(p);
                }
                m.write(beside(ev.out));
            } else if (!ev.per_turn_out.empty()) {
                write_file(ev.per_turn_out, per_turn_tsv(r));
            }
        });
    }

    // ---- prompt-sweep ---------------------------------------------------------------------
    struct SweepOpts {
        std::vector<std::string> reports;
        std::string checkpoint, adapter, schema, dialogues, out_dir, templates;
        bool compact = false, lenient = false;
        int max_new = 24;
    } sw;
    {
        CLI::App* sub = app.add_subcommand("prompt-sweep", "Evaluate the six test prompts and report JGA mean/variance");
        sub->add_option("--reports", sw.reports, "Existing report files (skip prediction)")->check(CLI::ExistingFile);
        sub->add_option("--checkpoint", sw.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
        sub->add_option("--adapter", sw.adapter, "Standalone adapter file")->check(CLI::ExistingFile);
        sub->add_option("--schema", sw.schema, "Schema file")->check(CLI::ExistingFile);
        sub->add_option("--dialogues", sw.dialogues, "Evaluation dialogues")->check(CLI::ExistingFile);
        sub->add_option("--out-dir", sw.out_dir, "Output directory")->required();
        sub->add_option("--templates", sw.templates, "Template file")->check(CLI::ExistingFile);
        sub->add_flag("--compact", sw.compact, "Start from the compact template set");
        sub->add_option("--max-new", sw.max_new, "Decode length cap")->capture_default_str();
        sub->add_flag("--lenient", sw.lenient, "Keep off-list categorical values with a warning");
        add_workers(sub);
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            std::vector<NamedReport> named;
            if (!sw.reports.empty()) {
                for (const auto& p : sw.reports) {
                    named.push_back({fs::path(p).stem().string(), report_from_json(read_file(p))});
                    m.input(p);
                }
            } else {
                if (sw.checkpoint.empty() || sw.schema.empty() || sw.dialogues.empty()) {
                    throw UsageError("prompt-sweep needs --reports or --checkpoint, --schema and --dialogues");
                }
                LoadedModel lm = load_model(sw.checkpoint, sw.adapter);
                const Schema schema = read_schema(sw.schema);
                const auto dialogues = read_dialogues(sw.dialogues, schema, !sw.lenient, common.workers, err);
                const TemplateSet templates = read_templates(sw.templates, sw.compact);
                for (const PromptVariant& v : sensitivity_variants()) {
                    log("prompt " + v.label());
                    const PredictionSet p = predict_corpus(lm.model, lm.tokenizer, dialogues, schema, templates, v,
                                                           {sw.max_new, common.workers});
                    EvalReport r = evaluate(p, dialogues, schema);
                    const std::string path = in_dir(sw.out_dir, "report_" + v.label() + ".json");
                    write_file(path, report_to_json(r));
                    m.output(path);
                    named.push_back({v.label(), std::move(r)});
                }
                m.input(sw.checkpoint);
                m.input(sw.schema);
                m.input(sw.dialogues);
            }
            if (named.size() < 2) throw UsageError("prompt-sweep needs at least two reports");
            std::vector<EvalReport> reports;
            for (const auto& n : named) reports.push_back(n.report);
            const Sensitivity s = prompt_sensitivity(reports);
            ordered_json doc;
            doc["mean"] = s.mean;
            doc["variance"] = s.variance;
            ordered_json per = ordered_json::array();
            for (const auto& n : named) per.push_back({{"prompt", n.label}, {"jga", n.report.jga}});
            doc["prompts"] = per;
            write_file(in_dir(sw.out_dir, "sensitivity.json"), doc.dump(2) + "\n");
            write_file(in_dir(sw.out_dir, "sensitivity.tsv"), sensitivity_table(named));
            m.output(in_dir(sw.out_dir, "sensitivity.json"));
            m.output(in_dir(sw.out_dir, "sensitivity.tsv"));
            m.write(in_dir(sw.out_dir, "manifest.json"));
            for (const auto& n : named) out << n.label << '\t' << n.report.jga << '\n';
            out << "mean\t" << s.mean << "\nvariance\t" << s.variance << '\n';
        });
    }

    // ---- query-llm ------------------------------------------------------------------------
    struct QueryOpts {
        std::string schema, dialogues, out, templates;
        std::string mode = "single_no_demo";
        bool export_from_cache = false, lenient = false;
    } qo;
    GatewayConfig gw;
    {
        CLI::App* sub = app.add_subcommand("query-llm", "Query a chat-completion endpoint for slot values");
        sub->add_option("--schema", qo.schema, "Schema file")->required()->check(CLI::ExistingFile);
        sub->add_option("--dialogues", qo.dialogues, "Dialogues to query")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", qo.out, "Predictions JSONL")->required();
        sub->add_option("--mode", qo.mode, "Prompt shape")
            ->capture_default_str()
            ->check(CLI::IsMember({"single_no_demo", "multi_no_demo", "single_one_demo", "multi_one_demo"}));
        sub->add_option("--templates", qo.templates, "Template file")->check(CLI::ExistingFile);
        sub->add_option("--endpoint", gw.endpoint, "Chat-completion URL")->capture_default_str();
        sub->add_option("--model", gw.model, "Model name")->capture_default_str();
        sub->add_option("--max-in-flight", gw.max_in_flight, "Concurrent requests")->capture_default_str();
        sub->add_option("--rpm", gw.requests_per_minute, "Requests per minute")->capture_default_str();
        sub->add_option("--max-attempts", gw.retry.max_attempts, "Attempts per request")->capture_default_str();
        sub->add_option("--backoff", gw.retry.backoff_base_s, "Backoff base in seconds")->capture_default_str();
        sub->add_option("--cache-dir", gw.cache_dir, "Response cache directory")->capture_default_str();
        sub->add_option("--api-key-env", gw.api_key_env, "Environment variable holding the API key")
            ->capture_default_str();
        sub->add_option("--temperature", gw.temperature, "Decoding temperature")->capture_default_str();
        sub->add_option("--timeout", gw.timeout_s, "Per-request timeout in seconds")->capture_default_str();
        sub->add_flag("--offline", gw.offline, "Serve from the cache only");
        sub->add_flag("--export-from-cache", qo.export_from_cache, "Write predictions from cached responses only");
        sub->add_flag("--lenient", qo.lenient, "Keep off-list categorical values with a warning");
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            if (qo.export_from_cache) gw.offline = true;
            const Schema schema = read_schema(qo.schema);
            const auto dialogues = read_dialogues(qo.dialogues, schema, !qo.lenient, 1, err);
            const TemplateSet templates = read_templates(qo.templates, false);
            Gateway gateway(gw, [&](const std::string& s) { log(s); });
            Warnings w;
            QueryStats qs;
            const PredictionSet preds =
                query_corpus(gateway, dialogues, schema, templates, remote_mode_from_string(qo.mode), &w, &qs);
            for (const auto& line : w) err << "warning: " << line << '\n';
            write_file(qo.out, predictions_to_jsonl(preds));
            const GatewayStats st = gateway.stats();
            m.input(qo.schema);
            m.input(qo.dialogues);
            m.output(qo.out);
            m.note("prompts", qs.prompts);
            m.note("failed", qs.failed);
            m.note("invalid_responses", qs.invalid);
            m.note("network_requests", st.network_requests);
            m.note("cache_hits", st.cache_hits);
            m.write(beside(qo.out));
            out << "prompts\t" << qs.prompts << "\nfailed\t" << qs.failed << "\ninvalid\t" << qs.invalid
                << "\nnetwork_requests\t" << st.network_requests << "\ncache_hits\t" << st.cache_hits << '\n';
            if (qs.failed > 0 && gw.offline) {
                throw RuntimeFailure(std::to_string(qs.failed) + " prompts missing from the cache");
            }
        });
    }

    // ---- plot -----------------------------------------------------------------------------
    struct PlotOpts {
        std::vector<std::string> reports;
        std::string out_dir;
    } po;
    {
        CLI::App* sub = app.add_subcommand("plot", "Per-turn JGA chart and prompt-variance box data");
        sub->add_option("--reports", po.reports, "Report files, optionally label=path");
        sub->add_option("--out-dir", po.out_dir, "Output directory")->required();
        sub->callback([&, sub] {
            if (po.reports.empty()) throw UsageError("plot needs at least one report");
            Manifest m(*sub, args);
            std::vector<NamedReport> named;
            for (const auto& spec : po.reports) {
                const auto eq = spec.find('=');
                const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
                const std::string label =
                    eq == std::string::npos ? fs::path(path).stem().string() : spec.substr(0, eq);
                named.push_back({label, report_from_json(read_file(path))});
                m.input(path);
            }
            const PlotFiles files = emit_plots(named, po.out_dir);
            for (const auto& f : files.written) {
                m.output(f);
                out << f << '\n';
            }
            m.write(in_dir(po.out_dir, "manifest.json"));
        });
    }

    // ---- merge-adapter --------------------------------------------------------------------
    struct MergeOpts {
        std::string base, adapter, out;
    } mo;
    {
        CLI::App* sub = app.add_subcommand("merge-adapter", "Fold adapters into the base weights");
        sub->add_option("--base", mo.base, "Base checkpoint")->required()->check(CLI::ExistingFile);
        sub->add_option("--adapter", mo.adapter, "Standalone adapter file (omit if the base carries one)")
            ->check(CLI::ExistingFile);
        sub->add_option("--out", mo.out, "Fused checkpoint")->required();
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            merge_adapter_file(mo.base, mo.adapter, mo.out);
            m.input(mo.base);
            if (!mo.adapter.empty()) m.input(mo.adapter);
            m.output(mo.out);
            m.write(beside(mo.out));
            out << "wrote " << mo.out << '\n';
        });
    }

    // ---- desk-run ---------------------------------------------------------------------------
    struct DeskOpts {
        std::string out_dir;
        int pretrain_dialogues = 0;
        int pretrain_epochs = 0;
        int finetune_epochs = 0;
        bool ablation = false, sweep = false;
    } dk;
    {
        CLI::App* sub = app.add_subcommand("desk-run", "Synthesize, pretrain, LoRA-tune and evaluate end to end");
        sub->add_option("--out-dir", dk.out_dir, "Output directory")->required();
        sub->add_option("--pretrain-dialogues", dk.pretrain_dialogues, "Override the pretraining corpus size");
        sub->add_option("--pretrain-epochs", dk.pretrain_epochs, "Override pretraining epochs");
        sub->add_option("--finetune-epochs", dk.finetune_epochs, "Override adapter-training epochs");
        sub->add_flag("--ablation", dk.ablation, "Also train the fixed-template baseline");
        sub->add_flag("--sweep", dk.sweep, "Also run the six-prompt sensitivity sweep");
        add_seed(sub);
        add_workers(sub);
        sub->callback([&, sub] {
            Manifest m(*sub, args);
            DeskConfig cfg;
            cfg.seed = common.seed;
            cfg.workers = common.workers;
            if (dk.pretrain_dialogues > 0) cfg.pretrain_dialogues = dk.pretrain_dialogues;
            if (dk.pretrain_epochs > 0) cfg.pretrain.epochs = dk.pretrain_epochs;
            if (dk.finetune_epochs > 0) cfg.finetune.epochs = dk.finetune_epochs;
            m.seed("seed", cfg.seed);
            const DeskData data = make_desk_data(cfg);
            const Tokenizer tok(cfg.templates.segment_tokens());
            const Model base = pretrain_base(data, cfg, nullptr, log);
            save_checkpoint(in_dir(dk.out_dir, "base.ckpt"), base, tok);
            const Model tuned = finetune_adapters(base, data, cfg, DatasetMode::assembled, nullptr, log);
            save_adapter(in_dir(dk.out_dir, "assembled.adapter"), tuned);
            PredictionSet preds;
            const EvalReport r = evaluate_variant(tuned, data, cfg, cfg.eval_variant, &preds);
            const EvalReport none = evaluate(none_predictions(data.split.eval, data.corpus.schema),
                                             data.split.eval, data.corpus.schema);
            write_file(in_dir(dk.out_dir, "predictions.jsonl"), predictions_to_jsonl(preds));
            write_file(in_dir(dk.out_dir, "report.json"), report_to_json(r));
            write_file(in_dir(dk.out_dir, "baseline_none.json"), report_to_json(none));
            out << "assembled_jga\t" << r.jga << "\nall_none_jga\t" << none.jga << '\n';
            m.note("assembled_jga", r.jga);
            m.note("all_none_jga", none.jga);
            if (dk.ablation) {
                const Model fixed = finetune_adapters(base, data, cfg, DatasetMode::fixed, nullptr, log);
                const EvalReport rf = evaluate_variant(fixed, data, cfg, cfg.eval_variant);
                write_file(in_dir(dk.out_dir, "report_fixed.json"), report_to_json(rf));
                out << "fixed_jga\t" << rf.jga << '\n';
                m.note("fixed_jga", rf.jga);
            }
            if (dk.sweep) {
                const SweepResult s = prompt_sweep(tuned, data, cfg);
                write_file(in_dir(dk.out_dir, "sweep.tsv"), sweep_tsv(s));
                out << "sweep_mean\t" << s.stats.mean << "\nsweep_variance\t" << s.stats.variance << '\n';
            }
            m.output(dk.out_dir);
            m.write(in_dir(dk.out_dir, "manifest.json"));
        });
    }

    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
        return kExitOk;
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << DSTKIT_VERSION << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::out_of_range& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace dstkit::cli
