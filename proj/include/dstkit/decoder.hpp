#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dstkit/lora.hpp"

namespace dstkit {

enum class Projection : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };

std::string to_string(Projection p);
Projection projection_from_string(std::string_view name);

struct LoraSettings {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
};

struct ToyDecoderConfig {
    int vocab_size = 264;
    int model_dim = 64;
    int n_layers = 2;
    int n_heads = 4;
    int context_len = 256;
    int mlp_ratio = 4;
    std::vector<Projection> target_modules = {Projection::q, Projection::k, Projection::v,
                                              Projection::o};
    LoraSettings lora;

    // Throws std::invalid_argument. A non-zero budget must fit the context.
    void validate(std::size_t truncation_budget = 0) const;
    bool targets(Projection p) const;
};

// Trainable-parameter accounting for adapters on `config` (formula route).
ParamCount count_trainable(const ToyDecoderConfig& config);
// Parameters of the base model, no adapters.
std::int64_t count_base_params(const ToyDecoderConfig& config);

// Mean over masked rows of -log softmax(logits)[target]. Writes dL/dlogits
// when `dlogits` is given. Throws std::invalid_argument on an empty mask or
// shape mismatch.
template <class S>
S nll_loss(const Matrix<S>& logits, std::span<const int> targets,
           std::span<const std::uint8_t> mask, Matrix<S>* dlogits = nullptr);

template <class S>
struct DecoderBlock {
    Matrix<S> ln1_gain, ln1_bias;  // 1 x d
    std::array<LoraLinear<S>, 4> proj;  // q, k, v, o
    Matrix<S> ln2_gain, ln2_bias;
    Matrix<S> fc1, fc1_bias;  // f x d, 1 x f
    Matrix<S> fc2, fc2_bias;  // d x f, 1 x d
};

template <class S>
struct DecoderWeights {
    Matrix<S> token_embedding;  // V x d
    std::vector<DecoderBlock<S>> blocks;
    Matrix<S> lnf_gain, lnf_bias;
    Matrix<S> head;  // V x d
};

enum class ParamKind : std::uint8_t { base, adapter };

// Rotary position tables: pair p of a head rotates by pos * 10000^(-2p/dh).
template <class S>
class RotaryTable {
public:
    RotaryTable() = default;
    RotaryTable(int context_len, int head_dim);

    // Rotates each head of each row in place, row i at position offset + i.
    // `inverse` applies the transpose (used for gradients).
    void rotate(Matrix<S>& m, Eigen::Index offset, int n_heads, bool inverse) const;

private:
    Matrix<S> cos_, sin_;  // context_len x head_dim / 2
};

/// Small pre-norm decoder-only transformer with rotary positions and
/// LoRA-capable attention projections. Without adapters every weight is trainable; once adapters
/// are attached only the adapter factors are.
template <class S>
class ToyDecoder {
public:
    using Visitor = std::function<void(const std::string& name, Matrix<S>& value, ParamKind kind)>;
    using ConstVisitor =
        std::function<void(const std::string& name, const Matrix<S>& value, ParamKind kind)>;
    using PairVisitor = std::function<void(const std::string& name, Matrix<S>& value,
                                           Matrix<S>& grad, ParamKind kind)>;

    ToyDecoder() = default;
    ToyDecoder(const ToyDecoderConfig& config, std::uint64_t seed);

    const ToyDecoderConfig& config() const noexcept { return config_; }
    DecoderWeights<S>& weights() noexcept { return w_; }
    const DecoderWeights<S>& weights() const noexcept { return w_; }

    // Adds B = 0 adapters to the configured target modules.
    void attach_adapters(std::uint64_t seed);
    void drop_adapters();
    // Folds every adapter into its W0 and removes it.
    void merge_adapters();
    bool has_adapters() const noexcept;

    void visit(const Visitor& fn);
    void visit(const ConstVisitor& fn) const;
    // Visits trainable parameters with their gradient buffers.
    void visit_trainable(const PairVisitor& fn);
    std::int64_t trainable_parameter_count() const;
    std::int64_t parameter_count() const;

    void zero_grad();

    // Accumulates grad_scale * dLoss/dparam for one sequence and returns the
    // loss. target_mask[i] selects position i (predicting tokens[i + 1]).
    S forward_backward(std::span<const int> tokens, std::span<const std::uint8_t> target_mask,
                       S grad_scale, SplitMix64* dropout_rng);

    // Loss only, no dropout.
    S loss(std::span<const int> tokens, std::span<const std::uint8_t> target_mask) const;

    // Logits for every position (n x V), inference mode.
    Matrix<S> logits(std::span<const int> tokens) const;

    // Greedy continuation with a key/value cache. Stops at `stop_token` (not
    // included) or after `max_new` tokens.
    std::vector<int> greedy(std::span<const int> prompt, int max_new, int stop_token) const;

    // FNV-1a over the raw bytes of the base (non-adapter) weights.
    std::uint64_t base_fingerprint() const;

private:
    ToyDecoderConfig config_;
    DecoderWeights<S> w_;
    RotaryTable<S> rope_;
    DecoderWeights<S> g_;  // gradients, same shapes as w_ (projections unused)
    std::vector<std::array<LoraGrads<S>, 4>> proj_grads_;

    void check_tokens(std::span<const int> tokens) const;
    void resize_grads();
};

extern template class ToyDecoder<float>;
extern template class ToyDecoder<double>;

}  // namespace dstkit
