#include "dstkit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <thread>

#include "dstkit/errors.hpp"
#include "dstkit/keyed_rng.hpp"

namespace dstkit {

PredictionSet predict_samples(const Model& model, const Tokenizer& tokenizer,
                              std::span<const InstructionSample> samples,
                              const PredictOptions& options) {
    const std::size_t budget = prompt_budget(model, options.max_new);
    std::vector<Value> values(samples.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < samples.size(); i = next++) {
            InstructionSample s = samples[i];
            s.output.clear();
            if (sequence_length(s, tokenizer) > budget) s = truncate_to_budget(s, budget, tokenizer);
            values[i] = canonical_value(predict_value(model, tokenizer, s, options.max_new));
        }
    };
    const unsigned n = std::clamp<unsigned>(options.workers, 1, 64);
    if (n == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < n; ++w) pool.emplace_back(work);
    }
    PredictionSet preds;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const SampleMeta& m = samples[i].meta;
        preds.set(m.dialogue_id, m.turn_index, m.slot_id, std::move(values[i]));
    }
    return preds;
}

PredictionSet predict_corpus(const Model& model, const Tokenizer& tokenizer,
                             std::span<const Dialogue> corpus, const Schema& schema,
                             const TemplateSet& templates, const PromptVariant& variant,
                             const PredictOptions& options) {
    const auto samples = generate_variant_dataset(corpus, schema, templates, variant);
    PredictionSet p = predict_samples(model, tokenizer, samples, options);
    p.provenance = variant.label();
    return p;
}

std::string pretraining_document(const Dialogue& dialogue, const Schema& schema,
                                 const TemplateSet& templates, std::uint64_t seed) {
    if (dialogue.turns.empty()) throw DataError(dialogue.id + ": no turns");
    SplitMix64 rng(keyed_seed(seed, {"pretrain-doc", dialogue.id}));
    const std::size_t cut = 1 + static_cast<std::size_t>(rng.next() % dialogue.turns.size());
    std::string out = render_context(std::span<const Turn>(dialogue.turns.data(), cut), templates);
    out += '\n';
    const DialogueState& state = dialogue.gold_states[cut - 1];
    std::vector<std::size_t> set, unset;
    for (std::size_t j = 0; j < schema.size(); ++j) (state.at(j).is_none() ? unset : set).push_back(j);
    for (std::size_t i = unset.size(); i > 1; --i) std::swap(unset[i - 1], unset[rng.next() % i]);
    unset.resize(std::min(unset.size(), std::max<std::size_t>(set.size(), 1)));
    std::vector<std::size_t> lines = set;
    lines.insert(lines.end(), unset.begin(), unset.end());
    for (std::size_t i = lines.size(); i > 1; --i) std::swap(lines[i - 1], lines[rng.next() % i]);
    for (const std::size_t j : lines) {
        const Value& v = state.at(j);
        out += "<" + schema[j].id() + "> = " + (v.is_none() ? std::string("NONE") : v.render()) + '\n';
    }
    return out;
}

std::vector<TrainingSequence> pretraining_sequences(std::span<const Dialogue> corpus, const Schema& schema,
                                                    const TemplateSet& templates, const Tokenizer& tokenizer,
                                                    int context, std::uint64_t seed) {
    std::vector<TrainingSequence> seqs;
    seqs.reserve(corpus.size());
    const auto ctx = static_cast<std::size_t>(context);
    for (const Dialogue& d : corpus) {
        TrainingSequence s = encode_text(pretraining_document(d, schema, templates, seed), tokenizer);
        if (s.tokens.size() > ctx) {
            s.tokens.resize(ctx);
            s.mask.resize(ctx);
            s.mask.back() = 0;
        }
        seqs.push_back(std::move(s));
    }
    return seqs;
}

DeskConfig::DeskConfig() {
    model.context_len = 384;
    pretrain.learning_rate = 3e-3;
    pretrain.batch_size = 16;
    pretrain.epochs = 12;
    pretrain.warmup_fraction = 0.05;
    pretrain.linear_decay = true;
    pretrain.loss_on_output_only = false;
    finetune.learning_rate = 1e-2;
    finetune.batch_size = 16;
    finetune.epochs = 1;
    finetune.warmup_fraction = 0.05;
    finetune.linear_decay = true;
}

DeskData make_desk_data(const DeskConfig& cfg) {
    DeskData data;
    data.corpus = synth_corpus(cfg.synth, cfg.seed, cfg.workers);
    data.split = few_shot_split(data.corpus.dialogues, cfg.train_fraction, cfg.seed);
    SynthConfig pc = cfg.synth;
    pc.n_dialogues = cfg.pretrain_dialogues;
    data.pretrain_corpus = synth_corpus(pc, keyed_seed(cfg.seed, {"pretrain-corpus"}), cfg.workers);
    return data;
}

Model pretrain_base(const DeskData& data, const DeskConfig& cfg, TrainResult* trace, const LogFn& log) {
    const Tokenizer tokenizer(cfg.templates.segment_tokens());
    ToyDecoderConfig mc = cfg.model;
    mc.vocab_size = tokenizer.vocab_size();
    Model model(mc, keyed_seed(cfg.seed, {"base-init"}));
    const auto seqs = pretraining_sequences(data.pretrain_corpus.dialogues, data.pretrain_corpus.schema,
                                            cfg.templates, tokenizer, mc.context_len,
                                            keyed_seed(cfg.seed, {"pretrain-docs"}));
    TrainConfig tc = cfg.pretrain;
    tc.seed = keyed_seed(cfg.seed, {"pretrain"});
    const TrainResult r = train_sequences(model, seqs, tc, [&](long step, double loss) {
        if (log && step % 50 == 0) log("pretrain step " + std::to_string(step) + " loss " + std::to_string(loss));
    });
    if (trace != nullptr) *trace = r;
    return model;
}

Model finetune_adapters(const Model& base, const DeskData& data, const DeskConfig& cfg,
                        DatasetMode mode, TrainResult* trace, const LogFn& log) {
    const Tokenizer tokenizer(cfg.templates.segment_tokens());
    Model model = base;
    model.attach_adapters(keyed_seed(cfg.seed, {"adapter-init"}));
    AssemblyPolicy policy{cfg.p_description, cfg.p_pvl, 0.5, keyed_seed(cfg.seed, {"assembly"})};
    const auto samples = generate_instruction_dataset(data.split.train, data.corpus.schema,
                                                      cfg.templates, policy, mode, cfg.workers);
    TrainConfig tc = cfg.finetune;
    tc.seed = keyed_seed(cfg.seed, {"finetune"});
    const TrainResult r = train(model, samples, tokenizer, tc, [&](long step, double loss) {
        if (log && step % 50 == 0) log("finetune step " + std::to_string(step) + " loss " + std::to_string(loss));
    });
    if (trace != nullptr) *trace = r;
    return model;
}

EvalReport evaluate_variant(const Model& model, const DeskData& data, const DeskConfig& cfg,
                            const PromptVariant& variant, PredictionSet* preds) {
    const Tokenizer tokenizer(cfg.templates.segment_tokens());
    PredictOptions po = cfg.predict;
    po.workers = std::max(po.workers, cfg.workers);
    PredictionSet p = predict_corpus(model, tokenizer, data.split.eval, data.corpus.schema,
                                     cfg.templates, variant, po);
    EvalReport r = evaluate(p, data.split.eval, data.corpus.schema);
    if (preds != nullptr) *preds = std::move(p);
    return r;
}

SweepResult prompt_sweep(const Model& model, const DeskData& data, const DeskConfig& cfg) {
    SweepResult out;
    out.variants = sensitivity_variants();
    for (const PromptVariant& v : out.variants) out.reports.push_back(evaluate_variant(model, data, cfg, v));
    out.stats = prompt_sensitivity(out.reports);
    return out;
}

std::string sweep_tsv(const SweepResult& sweep) {
    std::ostringstream out;
    out.precision(10);
    out << "prompt\tjga\taga\n";
    for (std::size_t i = 0; i < sweep.reports.size(); ++i) {
        out << sweep.variants[i].label() << '\t' << sweep.reports[i].jga << '\t';
        if (sweep.reports[i].aga) out << *sweep.reports[i].aga;
        out << '\n';
    }
    out << "# mean\t" << sweep.stats.mean << "\n# variance\t" << sweep.stats.variance << '\n';
    return out.str();
}

}  // namespace dstkit
