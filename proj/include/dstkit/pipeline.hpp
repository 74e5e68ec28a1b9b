#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dstkit/corpus.hpp"
#include "dstkit/metrics.hpp"
#include "dstkit/prompt.hpp"
#include "dstkit/train.hpp"

namespace dstkit {

using LogFn = std::function<void(const std::string&)>;

struct PredictOptions {
    int max_new = 24;
    unsigned workers = 1;
};

// Greedy prediction for each sample. Samples are truncated (oldest turns
// first) so the prompt plus `max_new` tokens fits the context. Outputs are
// mapped through canonical_value.
PredictionSet predict_samples(const Model& model, const Tokenizer& tokenizer,
                              std::span<const InstructionSample> samples,
                              const PredictOptions& options = {});

// Every (dialogue, turn, slot) of `corpus` under one fixed prompt variant.
PredictionSet predict_corpus(const Model& model, const Tokenizer& tokenizer,
                             std::span<const Dialogue> corpus, const Schema& schema,
                             const TemplateSet& templates, const PromptVariant& variant,
                             const PredictOptions& options = {});

// Plain-text pretraining document for one dialogue: the rendered turns up
// to a seeded cut, then "slot-id = value" lines for every slot set at that
// turn and as many unset ones (value NONE), in shuffled order.
std::string pretraining_document(const Dialogue& dialogue, const Schema& schema,
                                 const TemplateSet& templates, std::uint64_t seed);

// Encoded pretraining documents, clipped to `context` tokens.
std::vector<TrainingSequence> pretraining_sequences(std::span<const Dialogue> corpus, const Schema& schema,
                                                    const TemplateSet& templates, const Tokenizer& tokenizer,
                                                    int context, std::uint64_t seed);

struct DeskConfig {
    SynthConfig synth{200, 3, 4, 4, 0.5};
    std::uint64_t seed = 7;
    double train_fraction = 0.8;
    int pretrain_dialogues = 2000;
    ToyDecoderConfig model;
    TrainConfig pretrain;
    TrainConfig finetune;
    TemplateSet templates = TemplateSet::compact();
    double p_description = 0.5;
    double p_pvl = 0.5;
    PromptVariant eval_variant{InstructionKind::standard, true, true};
    PredictOptions predict;
    unsigned workers = 1;

    DeskConfig();
};

struct DeskData {
    SynthCorpus corpus;
    CorpusSplit split;
    SynthCorpus pretrain_corpus;
};

// Synthesizes the evaluation corpus, its train/held-out split and a
// disjoint pretraining corpus (separate seed stream, same schema).
DeskData make_desk_data(const DeskConfig& cfg);

// Full-parameter language-model pretraining on the pretraining corpus.
Model pretrain_base(const DeskData& data, const DeskConfig& cfg, TrainResult* trace = nullptr,
                    const LogFn& log = {});

// Copies `base`, attaches adapters and trains them on the training split
// rendered as assembled (or fixed-template) instructions.
Model finetune_adapters(const Model& base, const DeskData& data, const DeskConfig& cfg,
                        DatasetMode mode, TrainResult* trace = nullptr, const LogFn& log = {});

EvalReport evaluate_variant(const Model& model, const DeskData& data, const DeskConfig& cfg,
                            const PromptVariant& variant, PredictionSet* preds = nullptr);

struct SweepResult {
    std::vector<PromptVariant> variants;
    std::vector<EvalReport> reports;
    Sensitivity stats;
};

SweepResult prompt_sweep(const Model& model, const DeskData& data, const DeskConfig& cfg);

// "label\tjga\taga" rows followed by mean and variance lines.
std::string sweep_tsv(const SweepResult& sweep);

}  // namespace dstkit
