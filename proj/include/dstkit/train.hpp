#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dstkit/decoder.hpp"
#include "dstkit/prompt.hpp"
#include "dstkit/tokenizer.hpp"

namespace dstkit {

using Model = ToyDecoder<float>;

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 16;
    int epochs = 1;
    long max_steps = 0;  // 0: run all epochs
    std::uint64_t seed = 0;
    bool loss_on_output_only = true;
    double max_grad_norm = 1.0;  // 0 disables clipping
    double warmup_fraction = 0.0;  // linear warmup over this share of steps
    bool linear_decay = false;     // then decay linearly to zero

    void validate() const;
};

// BOS + tokens + EOS with a per-position target mask. mask[i] = 1 when the
// loss includes predicting tokens[i + 1].
struct TrainingSequence {
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask;
};

// Instruction sample as BOS + prompt_text + output + EOS. With
// `output_only` the mask covers the output and EOS targets, otherwise
// every next-token target.
TrainingSequence encode_sample(const InstructionSample& sample, const Tokenizer& tokenizer,
                               bool output_only = true);

// Plain text document as BOS + text + EOS, every target masked in.
TrainingSequence encode_text(std::string_view text, const Tokenizer& tokenizer);

struct TrainResult {
    std::vector<double> loss_trace;  // mean batch loss per step
    long steps = 0;
    double seconds = 0.0;
};

using StepCallback = std::function<void(long step, double loss)>;

// Adam (beta 0.9/0.999, no weight decay) over the model's trainable
// parameters: the adapter factors when adapters are attached, otherwise the
// whole network. Batches are drawn from a per-epoch shuffle keyed by the
// seed. Throws std::invalid_argument on an empty set or a sequence longer
// than the context.
TrainResult train_sequences(Model& model, std::span<const TrainingSequence> sequences,
                            const TrainConfig& cfg, const StepCallback& on_step = {});

// Encodes samples (truncating old turns to fit the context) and trains.
TrainResult train(Model& model, std::span<const InstructionSample> samples,
                  const Tokenizer& tokenizer, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

std::string loss_trace_tsv(const std::vector<double>& trace);

// Greedy decode after BOS + prompt_text until EOS or `max_new` tokens.
// Throws std::invalid_argument when the prompt does not fit the context.
std::string predict_value(const Model& model, const Tokenizer& tokenizer,
                          const InstructionSample& sample, int max_new = 24);

// Largest token count a sample may occupy so that its prompt plus a
// `max_new` continuation fits the model context.
std::size_t prompt_budget(const Model& model, int max_new = 24);

}  // namespace dstkit
