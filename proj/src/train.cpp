#include "dstkit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dstkit/keyed_rng.hpp"

namespace dstkit {

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (epochs < 1 && max_steps <= 0) throw std::invalid_argument("need epochs >= 1 or max_steps > 0");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
    if (!(max_grad_norm >= 0.0)) throw std::invalid_argument("max_grad_norm must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw std::invalid_argument("warmup fraction must lie in [0, 1)");
    }
}

TrainingSequence encode_sample(const InstructionSample& sample, const Tokenizer& tokenizer,
                               bool output_only) {
    TrainingSequence seq;
    const std::vector<int> prompt = tokenizer.encode(prompt_text(sample));
    const std::vector<int> output = tokenizer.encode(sample.output);
    seq.tokens.reserve(prompt.size() + output.size() + 2);
    seq.tokens.push_back(Tokenizer::kBos);
    seq.tokens.insert(seq.tokens.end(), prompt.begin(), prompt.end());
    seq.tokens.insert(seq.tokens.end(), output.begin(), output.end());
    seq.tokens.push_back(Tokenizer::kEos);
    seq.mask.assign(seq.tokens.size(), output_only ? 0 : 1);
    seq.mask.back() = 0;
    if (output_only) {
        // positions whose next token is an output token or EOS
        for (std::size_t i = prompt.size(); i + 1 < seq.tokens.size(); ++i) seq.mask[i] = 1;
    }
    return seq;
}

TrainingSequence encode_text(std::string_view text, const Tokenizer& tokenizer) {
    TrainingSequence seq;
    seq.tokens.push_back(Tokenizer::kBos);
    const std::vector<int> body = tokenizer.encode(text);
    seq.tokens.insert(seq.tokens.end(), body.begin(), body.end());
    seq.tokens.push_back(Tokenizer::kEos);
    seq.mask.assign(seq.tokens.size(), 1);
    seq.mask.back() = 0;
    return seq;
}

namespace {

struct AdamSlot {
    Matrix<float> m;
    Matrix<float> v;
};

}  // namespace

TrainResult train_sequences(Model& model, std::span<const TrainingSequence> sequences,
                            const TrainConfig& cfg, const StepCallback& on_step) {
    cfg.validate();
    if (sequences.empty()) throw std::invalid_argument("training set is empty");
    const auto ctx = static_cast<std::size_t>(model.config().context_len);
    for (const auto& s : sequences) {
        if (s.tokens.size() > ctx) {
            throw std::invalid_argument("training sequence of " + std::to_string(s.tokens.size()) +
                                        " tokens exceeds context_len " + std::to_string(ctx));
        }
        if (s.mask.size() != s.tokens.size()) {
            throw std::invalid_argument("training sequence mask length mismatch");
        }
        for (int t : s.tokens) {
            if (t < 0 || t >= model.config().vocab_size) {
                throw std::invalid_argument("token id outside vocabulary: " + std::to_string(t));
            }
        }
    }

    const auto n = static_cast<long>(sequences.size());
    const long per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total = cfg.max_steps > 0 ? cfg.max_steps : per_epoch * cfg.epochs;
    const long warmup = static_cast<long>(cfg.warmup_fraction * static_cast<double>(total));

    std::vector<AdamSlot> slots;
    model.visit_trainable([&](const std::string&, Matrix<float>& value, Matrix<float>&, ParamKind) {
        slots.push_back({Matrix<float>::Zero(value.rows(), value.cols()),
                         Matrix<float>::Zero(value.rows(), value.cols())});
    });

    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    SplitMix64 dropout_rng(keyed_seed(cfg.seed, {"train-dropout"}));
    std::vector<std::size_t> order(sequences.size());
    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();

    long step = 0;
    for (long epoch = 0; step < total; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 shuffle(keyed_seed(cfg.seed, {"train-shuffle", std::to_string(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle.below(i)]);
        }
        for (std::size_t start = 0; start < order.size() && step < total;
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const auto scale = 1.0f / static_cast<float>(end - start);
            model.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t j = start; j < end; ++j) {
                const auto& s = sequences[order[j]];
                batch_loss += model.forward_backward(s.tokens, s.mask, scale, &dropout_rng);
            }
            batch_loss /= static_cast<double>(end - start);

            double clip = 1.0;
            if (cfg.max_grad_norm > 0.0) {
                double sq = 0.0;
                model.visit_trainable([&](const std::string&, Matrix<float>&, Matrix<float>& g, ParamKind) {
                    sq += static_cast<double>(g.squaredNorm());
                });
                const double norm = std::sqrt(sq);
                if (norm > cfg.max_grad_norm) clip = cfg.max_grad_norm / norm;
            }
            ++step;
            double lr = cfg.learning_rate;
            if (warmup > 0 && step <= warmup) {
                lr *= static_cast<double>(step) / static_cast<double>(warmup);
            } else if (cfg.linear_decay) {
                lr *= static_cast<double>(total - step + 1) / static_cast<double>(total - warmup + 1);
            }
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            const auto step_size = static_cast<float>(lr / bc1);
            const auto cf = static_cast<float>(clip);
            std::size_t k = 0;
            model.visit_trainable([&](const std::string&, Matrix<float>& w, Matrix<float>& g, ParamKind) {
                AdamSlot& a = slots[k++];
                const Matrix<float> gc = g * cf;
                a.m = static_cast<float>(beta1) * a.m + static_cast<float>(1.0 - beta1) * gc;
                a.v = static_cast<float>(beta2) * a.v +
                      static_cast<float>(1.0 - beta2) * gc.cwiseProduct(gc);
                if (lr == 0.0) return;
                w.array() -= step_size * a.m.array() /
                             ((a.v.array() / static_cast<float>(bc2)).sqrt() + static_cast<float>(eps));
            });
            result.loss_trace.push_back(batch_loss);
            if (on_step) on_step(step, batch_loss);
        }
    }
    result.steps = step;
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

TrainResult train(Model& model, std::span<const InstructionSample> samples,
                  const Tokenizer& tokenizer, const TrainConfig& cfg, const StepCallback& on_step) {
    if (samples.empty()) throw std::invalid_argument("training set is empty");
    const auto ctx = static_cast<std::size_t>(model.config().context_len);
    std::vector<TrainingSequence> seqs;
    seqs.reserve(samples.size());
    for (const auto& s : samples) {
        if (sequence_length(s, tokenizer) > ctx) {
            seqs.push_back(encode_sample(truncate_to_budget(s, ctx, tokenizer), tokenizer,
                                         cfg.loss_on_output_only));
        } else {
            seqs.push_back(encode_sample(s, tokenizer, cfg.loss_on_output_only));
        }
    }
    return train_sequences(model, seqs, cfg, on_step);
}

std::string loss_trace_tsv(const std::vector<double>& trace) {
    std::ostringstream out;
    out.precision(8);
    out << "step\tloss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) out << (i + 1) << '\t' << trace[i] << '\n';
    return out.str();
}

std::size_t prompt_budget(const Model& model, int max_new) {
    const long b = model.config().context_len - std::max(max_new, 0);
    if (b < 2) throw std::invalid_argument("context too small for the requested decode length");
    return static_cast<std::size_t>(b);
}

std::string predict_value(const Model& model, const Tokenizer& tokenizer,
                          const InstructionSample& sample, int max_new) {
    std::vector<int> prompt{Tokenizer::kBos};
    const std::vector<int> body = tokenizer.encode(prompt_text(sample));
    prompt.insert(prompt.end(), body.begin(), body.end());
    if (prompt.size() > static_cast<std::size_t>(model.config().context_len)) {
        throw std::invalid_argument("prompt of " + std::to_string(prompt.size()) +
                                    " tokens exceeds context_len " +
                                    std::to_string(model.config().context_len));
    }
    if (max_new <= 0) return "";
    const std::vector<int> out = model.greedy(prompt, max_new, Tokenizer::kEos);
    std::vector<int> text;
    for (int t : out) {
        if (t != Tokenizer::kPad && t != Tokenizer::kBos) text.push_back(t);
    }
    return tokenizer.decode(text);
}

}  // namespace dstkit
