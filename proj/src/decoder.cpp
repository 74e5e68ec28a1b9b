#include "dstkit/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace dstkit {

std::string to_string(Projection p) {
    switch (p) {
        case Projection::q: return "q";
        case Projection::k: return "k";
        case Projection::v: return "v";
        case Projection::o: return "o";
    }
    return "?";
}

Projection projection_from_string(std::string_view name) {
    if (name == "q" || name == "q_proj") return Projection::q;
    if (name == "k" || name == "k_proj") return Projection::k;
    if (name == "v" || name == "v_proj") return Projection::v;
    if (name == "o" || name == "o_proj") return Projection::o;
    throw std::invalid_argument("unknown projection: " + std::string(name));
}

void ToyDecoderConfig::validate(std::size_t truncation_budget) const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("decoder config: " + what);
    };
    require(vocab_size > 0, "vocab_size must be positive");
    require(model_dim > 0, "model_dim must be positive");
    require(n_layers > 0, "n_layers must be positive");
    require(n_heads > 0 && model_dim % n_heads == 0, "n_heads must divide model_dim");
    require((model_dim / std::max(n_heads, 1)) % 2 == 0, "head dimension must be even for rotary positions");
    require(context_len > 1, "context_len must exceed 1");
    require(mlp_ratio > 0, "mlp_ratio must be positive");
    require(!target_modules.empty(), "target_modules must not be empty");
    for (std::size_t i = 0; i < target_modules.size(); ++i) {
        for (std::size_t j = i + 1; j < target_modules.size(); ++j) {
            require(target_modules[i] != target_modules[j], "duplicate target module");
        }
    }
    check_rank(model_dim, model_dim, lora.rank);
    require(lora.alpha > 0.0, "lora alpha must be positive");
    require(lora.dropout >= 0.0 && lora.dropout < 1.0, "lora dropout must lie in [0, 1)");
    if (truncation_budget > 0) {
        require(truncation_budget <= static_cast<std::size_t>(context_len),
                "truncation budget " + std::to_string(truncation_budget) +
                    " exceeds context_len " + std::to_string(context_len));
    }
}

bool ToyDecoderConfig::targets(Projection p) const {
    return std::find(target_modules.begin(), target_modules.end(), p) != target_modules.end();
}

ParamCount count_trainable(const ToyDecoderConfig& config) {
    return count_lora_params(config.n_layers, static_cast<std::int64_t>(config.target_modules.size()),
                             config.lora.rank, config.model_dim, config.model_dim,
                             count_base_params(config));
}

std::int64_t count_base_params(const ToyDecoderConfig& config) {
    const std::int64_t V = config.vocab_size;
    const std::int64_t d = config.model_dim;
    const std::int64_t f = d * config.mlp_ratio;
    const std::int64_t block = 2 * d + 4 * d * d + 2 * d + f * d + f + d * f + d;
    return V * d + config.n_layers * block + 2 * d + V * d;
}

template <class S>
S nll_loss(const Matrix<S>& logits, std::span<const int> targets,
           std::span<const std::uint8_t> mask, Matrix<S>* dlogits) {
    const auto n = static_cast<std::size_t>(logits.rows());
    if (targets.size() != n || mask.size() != n) {
        throw std::invalid_argument("nll_loss: targets/mask length must match logits rows");
    }
    std::size_t count = 0;
    for (auto m : mask) count += m != 0 ? 1 : 0;
    if (count == 0) {
        throw std::invalid_argument("nll_loss: empty target mask");
    }
    if (dlogits != nullptr) {
        dlogits->setZero(logits.rows(), logits.cols());
    }
    const S inv = S(1) / static_cast<S>(count);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] == 0) continue;
        const int t = targets[i];
        if (t < 0 || t >= logits.cols()) {
            throw std::invalid_argument("nll_loss: target id out of range");
        }
        const auto row = logits.row(static_cast<Eigen::Index>(i));
        const S mx = row.maxCoeff();
        const S z = (row.array() - mx).exp().sum();
        const S lse = mx + std::log(z);
        total += static_cast<double>(lse - row(t));
        if (dlogits != nullptr) {
            auto drow = dlogits->row(static_cast<Eigen::Index>(i));
            drow = ((row.array() - lse).exp() * inv).matrix();
            drow(t) -= inv;
        }
    }
    return static_cast<S>(total / static_cast<double>(count));
}

template float nll_loss<float>(const Matrix<float>&, std::span<const int>,
                               std::span<const std::uint8_t>, Matrix<float>*);
template double nll_loss<double>(const Matrix<double>&, std::span<const int>,
                                 std::span<const std::uint8_t>, Matrix<double>*);

namespace {

constexpr double kLnEps = 1e-5;

template <class S>
struct LnCache {
    Matrix<S> xhat;
    Vector<S> rstd;
};

template <class S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias,
                     LnCache<S>* cache) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Matrix<S> xhat(n, d);
    Vector<S> rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mean = x.row(i).mean();
        const auto centered = (x.row(i).array() - mean).matrix();
        const S var = centered.squaredNorm() / static_cast<S>(d);
        rstd[i] = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        xhat.row(i) = centered * rstd[i];
    }
    Matrix<S> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache != nullptr) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const LnCache<S>& c, const Matrix<S>& gain,
                              Matrix<S>* dgain, Matrix<S>* dbias) {
    if (dgain != nullptr) {
        *dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
        *dbias += dy.colwise().sum();
    }
    const Eigen::Index d = dy.cols();
    Matrix<S> dxhat = dy.array().rowwise() * gain.row(0).array();
    Matrix<S> dx(dy.rows(), d);
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const S m1 = dxhat.row(i).mean();
        const S m2 = dxhat.row(i).dot(c.xhat.row(i)) / static_cast<S>(d);
        dx.row(i) = ((dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2) * c.rstd[i]).matrix();
    }
    return dx;
}

template <class S>
S gelu(S u) {
    constexpr S c = S(0.7978845608028654);  // sqrt(2 / pi)
    return S(0.5) * u * (S(1) + std::tanh(c * (u + S(0.044715) * u * u * u)));
}

template <class S>
S gelu_grad(S u) {
    constexpr S c = S(0.7978845608028654);
    const S inner = c * (u + S(0.044715) * u * u * u);
    const S t = std::tanh(inner);
    const S dinner = c * (S(1) + S(3) * S(0.044715) * u * u);
    return S(0.5) * (S(1) + t) + S(0.5) * u * (S(1) - t * t) * dinner;
}

template <class S>
void add_row_bias(Matrix<S>& m, const Matrix<S>& bias) {
    m.array().rowwise() += bias.row(0).array();
}

template <class S>
void fill_gaussian(Matrix<S>& m, Eigen::Index rows, Eigen::Index cols, double stddev,
                   std::uint64_t seed, std::string_view name) {
    m.resize(rows, cols);
    SplitMix64 rng(keyed_seed(seed, {"decoder-init", name}));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<S>(stddev * rng.gaussian());
    }
}

template <class S>
struct BlockCache {
    LnCache<S> ln1;
    std::array<LoraRowsCache<S>, 4> proj;
    Matrix<S> q, k, v;
    std::vector<Matrix<S>> probs;  // per head, n x n
    LnCache<S> ln2;
    Matrix<S> ln2_out;
    Matrix<S> u;
    Matrix<S> act;
};

// Causal multi-head attention of `q` rows (absolute positions offset..)
// against the first `kv_len` key/value rows.
template <class S>
Matrix<S> attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                    Eigen::Index kv_len, Eigen::Index offset, int n_heads,
                    std::vector<Matrix<S>>* probs) {
    const Eigen::Index n = q.rows();
    const Eigen::Index d = q.cols();
    const Eigen::Index dh = d / n_heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Matrix<S> out(n, d);
    if (probs != nullptr) probs->resize(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const Eigen::Index c0 = h * dh;
        Matrix<S> s = (q.middleCols(c0, dh) * k.topRows(kv_len).middleCols(c0, dh).transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index visible = offset + i + 1;
            auto row = s.row(i);
            const S mx = row.head(visible).maxCoeff();
            row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
            row.head(visible) /= row.head(visible).sum();
            if (visible < kv_len) row.tail(kv_len - visible).setZero();
        }
        out.middleCols(c0, dh).noalias() = s * v.topRows(kv_len).middleCols(c0, dh);
        if (probs != nullptr) (*probs)[static_cast<std::size_t>(h)] = std::move(s);
    }
    return out;
}

}  // namespace

template <class S>
RotaryTable<S>::RotaryTable(int context_len, int head_dim) {
    const int half = head_dim / 2;
    cos_.resize(context_len, half);
    sin_.resize(context_len, half);
    for (int p = 0; p < half; ++p) {
        const double freq = std::pow(10000.0, -2.0 * p / head_dim);
        for (int pos = 0; pos < context_len; ++pos) {
            cos_(pos, p) = static_cast<S>(std::cos(pos * freq));
            sin_(pos, p) = static_cast<S>(std::sin(pos * freq));
        }
    }
}

template <class S>
void RotaryTable<S>::rotate(Matrix<S>& m, Eigen::Index offset, int n_heads, bool inverse) const {
    const Eigen::Index dh = m.cols() / n_heads;
    const Eigen::Index half = dh / 2;
    const S sign = inverse ? S(-1) : S(1);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const S* c = &cos_(offset + i, 0);
        const S* sn = &sin_(offset + i, 0);
        S* row = &m(i, 0);
        for (int h = 0; h < n_heads; ++h) {
            S* x = row + h * dh;
            for (Eigen::Index p = 0; p < half; ++p) {
                const S x0 = x[2 * p];
                const S x1 = x[2 * p + 1];
                const S s = sign * sn[p];
                x[2 * p] = x0 * c[p] - x1 * s;
                x[2 * p + 1] = x0 * s + x1 * c[p];
            }
        }
    }
}

template class RotaryTable<float>;
template class RotaryTable<double>;

template <class S>
ToyDecoder<S>::ToyDecoder(const ToyDecoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const Eigen::Index V = config_.vocab_size;
    const Eigen::Index d = config_.model_dim;
    const Eigen::Index f = d * config_.mlp_ratio;
    const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_res = s_in / std::sqrt(2.0 * config_.n_layers);
    fill_gaussian(w_.token_embedding, V, d, 0.1, seed, "tok");
    w_.blocks.resize(static_cast<std::size_t>(config_.n_layers));
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        auto& b = w_.blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        b.ln1_gain = Matrix<S>::Ones(1, d);
        b.ln1_bias = Matrix<S>::Zero(1, d);
        b.ln2_gain = Matrix<S>::Ones(1, d);
        b.ln2_bias = Matrix<S>::Zero(1, d);
        for (int m = 0; m < 4; ++m) {
            const auto proj = static_cast<Projection>(m);
            fill_gaussian(b.proj[static_cast<std::size_t>(m)].W0, d, d,
                          proj == Projection::o ? s_res : s_in, seed, p + to_string(proj));
        }
        fill_gaussian(b.fc1, f, d, s_in, seed, p + "fc1");
        b.fc1_bias = Matrix<S>::Zero(1, f);
        fill_gaussian(b.fc2, d, f, 1.0 / std::sqrt(2.0 * config_.n_layers * static_cast<double>(f)),
                      seed, p + "fc2");
        b.fc2_bias = Matrix<S>::Zero(1, d);
    }
    w_.lnf_gain = Matrix<S>::Ones(1, d);
    w_.lnf_bias = Matrix<S>::Zero(1, d);
    fill_gaussian(w_.head, V, d, s_in, seed, "head");
    rope_ = RotaryTable<S>(config_.context_len, d / config_.n_heads);
    resize_grads();
}

template <class S>
void ToyDecoder<S>::attach_adapters(std::uint64_t seed) {
    const Eigen::Index d = config_.model_dim;
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        for (Projection p : config_.target_modules) {
            const std::string name = "blocks." + std::to_string(l) + ".attn." + to_string(p);
            w_.blocks[l].proj[static_cast<std::size_t>(p)].adapter = init_adapter<S>(
                d, d, config_.lora.rank, static_cast<S>(config_.lora.alpha),
                keyed_seed(seed, {"adapter", name}), static_cast<S>(config_.lora.dropout));
        }
    }
    resize_grads();
}

template <class S>
void ToyDecoder<S>::drop_adapters() {
    for (auto& b : w_.blocks) {
        for (auto& pr : b.proj) pr.adapter.reset();
    }
    resize_grads();
}

template <class S>
void ToyDecoder<S>::merge_adapters() {
    for (auto& b : w_.blocks) {
        for (auto& pr : b.proj) {
            if (pr.adapter) {
                pr.W0 = merge(pr);
                pr.adapter.reset();
            }
        }
    }
    resize_grads();
}

template <class S>
bool ToyDecoder<S>::has_adapters() const noexcept {
    for (const auto& b : w_.blocks) {
        for (const auto& pr : b.proj) {
            if (pr.adapter) return true;
        }
    }
    return false;
}

template <class S>
void ToyDecoder<S>::visit(const Visitor& fn) {
    fn("tok_emb", w_.token_embedding, ParamKind::base);
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        auto& b = w_.blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        fn(p + "ln1.gain", b.ln1_gain, ParamKind::base);
        fn(p + "ln1.bias", b.ln1_bias, ParamKind::base);
        for (int m = 0; m < 4; ++m) {
            auto& pr = b.proj[static_cast<std::size_t>(m)];
            const std::string base = p + "attn." + to_string(static_cast<Projection>(m));
            fn(base + ".weight", pr.W0, ParamKind::base);
            if (pr.adapter) {
                fn(base + ".lora_A", pr.adapter->A, ParamKind::adapter);
                fn(base + ".lora_B", pr.adapter->B, ParamKind::adapter);
            }
        }
        fn(p + "ln2.gain", b.ln2_gain, ParamKind::base);
        fn(p + "ln2.bias", b.ln2_bias, ParamKind::base);
        fn(p + "fc1.weight", b.fc1, ParamKind::base);
        fn(p + "fc1.bias", b.fc1_bias, ParamKind::base);
        fn(p + "fc2.weight", b.fc2, ParamKind::base);
        fn(p + "fc2.bias", b.fc2_bias, ParamKind::base);
    }
    fn("lnf.gain", w_.lnf_gain, ParamKind::base);
    fn("lnf.bias", w_.lnf_bias, ParamKind::base);
    fn("head", w_.head, ParamKind::base);
}

template <class S>
void ToyDecoder<S>::visit(const ConstVisitor& fn) const {
    const_cast<ToyDecoder<S>*>(this)->visit(
        [&](const std::string& name, Matrix<S>& value, ParamKind kind) { fn(name, value, kind); });
}

template <class S>
void ToyDecoder<S>::visit_trainable(const PairVisitor& fn) {
    const bool adapters = has_adapters();
    if (adapters) {
        for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
            for (int m = 0; m < 4; ++m) {
                auto& pr = w_.blocks[l].proj[static_cast<std::size_t>(m)];
                if (!pr.adapter) continue;
                auto& g = proj_grads_[l][static_cast<std::size_t>(m)];
                const std::string base = "blocks." + std::to_string(l) + ".attn." +
                                         to_string(static_cast<Projection>(m));
                fn(base + ".lora_A", pr.adapter->A, g.dA, ParamKind::adapter);
                fn(base + ".lora_B", pr.adapter->B, g.dB, ParamKind::adapter);
            }
        }
        return;
    }
    fn("tok_emb", w_.token_embedding, g_.token_embedding, ParamKind::base);
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        auto& b = w_.blocks[l];
        auto& gb = g_.blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        fn(p + "ln1.gain", b.ln1_gain, gb.ln1_gain, ParamKind::base);
        fn(p + "ln1.bias", b.ln1_bias, gb.ln1_bias, ParamKind::base);
        for (int m = 0; m < 4; ++m) {
            fn(p + "attn." + to_string(static_cast<Projection>(m)) + ".weight",
               b.proj[static_cast<std::size_t>(m)].W0, proj_grads_[l][static_cast<std::size_t>(m)].dW0,
               ParamKind::base);
        }
        fn(p + "ln2.gain", b.ln2_gain, gb.ln2_gain, ParamKind::base);
        fn(p + "ln2.bias", b.ln2_bias, gb.ln2_bias, ParamKind::base);
        fn(p + "fc1.weight", b.fc1, gb.fc1, ParamKind::base);
        fn(p + "fc1.bias", b.fc1_bias, gb.fc1_bias, ParamKind::base);
        fn(p + "fc2.weight", b.fc2, gb.fc2, ParamKind::base);
        fn(p + "fc2.bias", b.fc2_bias, gb.fc2_bias, ParamKind::base);
    }
    fn("lnf.gain", w_.lnf_gain, g_.lnf_gain, ParamKind::base);
    fn("lnf.bias", w_.lnf_bias, g_.lnf_bias, ParamKind::base);
    fn("head", w_.head, g_.head, ParamKind::base);
}

template <class S>
std::int64_t ToyDecoder<S>::trainable_parameter_count() const {
    std::int64_t n = 0;
    const bool adapters = has_adapters();
    visit([&](const std::string&, const Matrix<S>& value, ParamKind kind) {
        if (adapters == (kind == ParamKind::adapter)) n += value.size();
    });
    return n;
}

template <class S>
std::int64_t ToyDecoder<S>::parameter_count() const {
    std::int64_t n = 0;
    visit([&](const std::string&, const Matrix<S>& value, ParamKind) { n += value.size(); });
    return n;
}

template <class S>
void ToyDecoder<S>::resize_grads() {
    g_ = w_;
    for (auto& b : g_.blocks) {
        for (auto& pr : b.proj) {
            pr.W0.resize(0, 0);
            pr.adapter.reset();
        }
    }
    proj_grads_.assign(w_.blocks.size(), {});
    zero_grad();
}

template <class S>
void ToyDecoder<S>::zero_grad() {
    const bool adapters = has_adapters();
    if (!adapters) {
        g_.token_embedding.setZero();
        for (auto& b : g_.blocks) {
            for (Matrix<S>* m : {&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.fc1,
                                 &b.fc1_bias, &b.fc2, &b.fc2_bias}) {
                m->setZero();
            }
        }
        g_.lnf_gain.setZero();
        g_.lnf_bias.setZero();
        g_.head.setZero();
    }
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        for (std::size_t m = 0; m < 4; ++m) {
            auto& g = proj_grads_[l][m];
            const auto& pr = w_.blocks[l].proj[m];
            if (adapters) {
                if (pr.adapter) {
                    g.dA.setZero(pr.adapter->A.rows(), pr.adapter->A.cols());
                    g.dB.setZero(pr.adapter->B.rows(), pr.adapter->B.cols());
                }
            } else {
                g.dW0.setZero(pr.W0.rows(), pr.W0.cols());
            }
        }
    }
}

template <class S>
void ToyDecoder<S>::check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) {
        throw std::invalid_argument("decoder input is empty");
    }
    if (tokens.size() > static_cast<std::size_t>(config_.context_len)) {
        throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                    " tokens exceeds context_len " +
                                    std::to_string(config_.context_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= config_.vocab_size) {
            throw std::invalid_argument("token id outside vocabulary: " + std::to_string(t));
        }
    }
}

template <class S>
S ToyDecoder<S>::forward_backward(std::span<const int> tokens,
                                  std::span<const std::uint8_t> target_mask, S grad_scale,
                                  SplitMix64* dropout_rng) {
    check_tokens(tokens);
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (target_mask.size() != tokens.size()) {
        throw std::invalid_argument("target mask length must equal sequence length");
    }
    if (target_mask.back() != 0) {
        throw std::invalid_argument("the last position has no next token to predict");
    }
    const bool base_trainable = !has_adapters();
    const int H = config_.n_heads;
    const Eigen::Index d = config_.model_dim;
    const Eigen::Index dh = d / H;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    Matrix<S> x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = w_.token_embedding.row(tokens[static_cast<std::size_t>(i)]);
    }
    std::vector<BlockCache<S>> caches(w_.blocks.size());
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
        const auto& b = w_.blocks[l];
        auto& c = caches[l];
        const Matrix<S> a = layer_norm(x, b.ln1_gain, b.ln1_bias, &c.ln1);
        c.q = lora_forward_rows(b.proj[0], a, &c.proj[0], dropout_rng);
        c.k = lora_forward_rows(b.proj[1], a, &c.proj[1], dropout_rng);
        rope_.rotate(c.q, 0, H, false);
        rope_.rotate(c.k, 0, H, false);
        c.v = lora_forward_rows(b.proj[2], a, &c.proj[2], dropout_rng);
        const Matrix<S> att = attention(c.q, c.k, c.v, n, 0, H, &c.probs);
        x.noalias() += lora_forward_rows(b.proj[3], att, &c.proj[3], dropout_rng);
        c.ln2_out = layer_norm(x, b.ln2_gain, b.ln2_bias, &c.ln2);
        c.u = c.ln2_out * b.fc1.transpose();
        add_row_bias(c.u, b.fc1_bias);
        c.act = c.u.unaryExpr([](S u) { return gelu(u); });
        Matrix<S> z = c.act * b.fc2.transpose();
        add_row_bias(z, b.fc2_bias);
        x += z;
    }
    LnCache<S> lnf;
    const Matrix<S> xf = layer_norm(x, w_.lnf_gain, w_.lnf_bias, &lnf);

    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (target_mask[static_cast<std::size_t>(i)] != 0) rows.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(rows.size());
    Matrix<S> hsel(m, d);
    std::vector<int> targets(rows.size());
    for (Eigen::Index r = 0; r < m; ++r) {
        hsel.row(r) = xf.row(rows[static_cast<std::size_t>(r)]);
        targets[static_cast<std::size_t>(r)] = tokens[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)] + 1)];
    }
    const Matrix<S> logits = hsel * w_.head.transpose();
    const std::vector<std::uint8_t> all(rows.size(), 1);
    Matrix<S> dlogits;
    const S loss = nll_loss<S>(logits, targets, all, &dlogits);
    dlogits *= grad_scale;

    if (base_trainable) g_.head.noalias() += dlogits.transpose() * hsel;
    const Matrix<S> dh_sel = dlogits * w_.head;
    Matrix<S> dxf = Matrix<S>::Zero(n, d);
    for (Eigen::Index r = 0; r < m; ++r) dxf.row(rows[static_cast<std::size_t>(r)]) = dh_sel.row(r);
    Matrix<S> dx = layer_norm_backward(dxf, lnf, w_.lnf_gain,
                                       base_trainable ? &g_.lnf_gain : nullptr,
                                       base_trainable ? &g_.lnf_bias : nullptr);

    for (std::size_t li = w_.blocks.size(); li-- > 0;) {
        const auto& b = w_.blocks[li];
        auto& gb = g_.blocks[li];
        auto& pg = proj_grads_[li];
        auto& c = caches[li];
        // MLP
        if (base_trainable) {
            gb.fc2.noalias() += dx.transpose() * c.act;
            gb.fc2_bias += dx.colwise().sum();
        }
        Matrix<S> du = dx * b.fc2;
        du.array() *= c.u.unaryExpr([](S u) { return gelu_grad(u); }).array();
        if (base_trainable) {
            gb.fc1.noalias() += du.transpose() * c.ln2_out;
            gb.fc1_bias += du.colwise().sum();
        }
        const Matrix<S> dln2 = du * b.fc1;
        dx += layer_norm_backward(dln2, c.ln2, b.ln2_gain, base_trainable ? &gb.ln2_gain : nullptr,
                                  base_trainable ? &gb.ln2_bias : nullptr);
        // attention
        const Matrix<S> datt = lora_backward_rows(b.proj[3], c.proj[3], dx, pg[3], base_trainable);
        Matrix<S> dq(n, d), dk(n, d), dv(n, d);
        for (int h = 0; h < H; ++h) {
            const Eigen::Index c0 = h * dh;
            const Matrix<S>& P = c.probs[static_cast<std::size_t>(h)];
            const auto dO = datt.middleCols(c0, dh);
            Matrix<S> dP = dO * c.v.middleCols(c0, dh).transpose();
            dv.middleCols(c0, dh).noalias() = P.transpose() * dO;
            for (Eigen::Index i = 0; i < n; ++i) {
                const S dot = P.row(i).head(i + 1).dot(dP.row(i).head(i + 1));
                dP.row(i).head(i + 1) =
                    (P.row(i).head(i + 1).array() * (dP.row(i).head(i + 1).array() - dot)).matrix();
                if (i + 1 < n) dP.row(i).tail(n - i - 1).setZero();
            }
            dq.middleCols(c0, dh).noalias() = (dP * c.k.middleCols(c0, dh)) * scale;
            dk.middleCols(c0, dh).noalias() = (dP.transpose() * c.q.middleCols(c0, dh)) * scale;
        }
        rope_.rotate(dq, 0, H, true);
        rope_.rotate(dk, 0, H, true);
        Matrix<S> da = lora_backward_rows(b.proj[0], c.proj[0], dq, pg[0], base_trainable);
        da += lora_backward_rows(b.proj[1], c.proj[1], dk, pg[1], base_trainable);
        da += lora_backward_rows(b.proj[2], c.proj[2], dv, pg[2], base_trainable);
        dx += layer_norm_backward(da, c.ln1, b.ln1_gain, base_trainable ? &gb.ln1_gain : nullptr,
                                  base_trainable ? &gb.ln1_bias : nullptr);
    }
    if (base_trainable) {
        for (Eigen::Index i = 0; i < n; ++i) {
            g_.token_embedding.row(tokens[static_cast<std::size_t>(i)]) += dx.row(i);
        }
    }
    return loss;
}

namespace {

// Inference forward over `tokens` at positions offset.., appending keys and
// values to the per-layer caches. Returns final-norm hidden states.
template <class S>
Matrix<S> infer_chunk(const DecoderWeights<S>& w, const ToyDecoderConfig& cfg, const RotaryTable<S>& rope,
                      std::span<const int> tokens, Eigen::Index offset,
                      std::vector<Matrix<S>>& kcache, std::vector<Matrix<S>>& vcache) {
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const Eigen::Index d = cfg.model_dim;
    Matrix<S> x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = w.token_embedding.row(tokens[static_cast<std::size_t>(i)]);
    }
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        const auto& b = w.blocks[l];
        const Matrix<S> a = layer_norm<S>(x, b.ln1_gain, b.ln1_bias, nullptr);
        Matrix<S> q = lora_forward_rows<S>(b.proj[0], a, nullptr, nullptr);
        Matrix<S> k = lora_forward_rows<S>(b.proj[1], a, nullptr, nullptr);
        rope.rotate(q, offset, cfg.n_heads, false);
        rope.rotate(k, offset, cfg.n_heads, false);
        kcache[l].middleRows(offset, n) = k;
        vcache[l].middleRows(offset, n) = lora_forward_rows<S>(b.proj[2], a, nullptr, nullptr);
        const Matrix<S> att = attention<S>(q, kcache[l], vcache[l], offset + n, offset, cfg.n_heads, nullptr);
        x.noalias() += lora_forward_rows<S>(b.proj[3], att, nullptr, nullptr);
        const Matrix<S> h = layer_norm<S>(x, b.ln2_gain, b.ln2_bias, nullptr);
        Matrix<S> u = h * b.fc1.transpose();
        add_row_bias(u, b.fc1_bias);
        u = u.unaryExpr([](S v) { return gelu(v); });
        Matrix<S> z = u * b.fc2.transpose();
        add_row_bias(z, b.fc2_bias);
        x += z;
    }
    return layer_norm<S>(x, w.lnf_gain, w.lnf_bias, nullptr);
}

template <class S>
void make_caches(const ToyDecoderConfig& cfg, std::vector<Matrix<S>>& k, std::vector<Matrix<S>>& v) {
    k.assign(static_cast<std::size_t>(cfg.n_layers), Matrix<S>::Zero(cfg.context_len, cfg.model_dim));
    v = k;
}

}  // namespace

template <class S>
S ToyDecoder<S>::loss(std::span<const int> tokens, std::span<const std::uint8_t> target_mask) const {
    check_tokens(tokens);
    if (target_mask.size() != tokens.size()) {
        throw std::invalid_argument("target mask length must equal sequence length");
    }
    if (target_mask.back() != 0) {
        throw std::invalid_argument("the last position has no next token to predict");
    }
    const Matrix<S> lg = logits(tokens);
    std::vector<int> targets(tokens.size(), 0);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) targets[i] = tokens[i + 1];
    return nll_loss<S>(lg, targets, target_mask);
}

template <class S>
Matrix<S> ToyDecoder<S>::logits(std::span<const int> tokens) const {
    check_tokens(tokens);
    std::vector<Matrix<S>> k, v;
    make_caches(config_, k, v);
    return infer_chunk(w_, config_, rope_, tokens, 0, k, v) * w_.head.transpose();
}

template <class S>
std::vector<int> ToyDecoder<S>::greedy(std::span<const int> prompt, int max_new,
                                       int stop_token) const {
    check_tokens(prompt);
    std::vector<Matrix<S>> k, v;
    make_caches(config_, k, v);
    std::vector<int> out;
    Matrix<S> h = infer_chunk(w_, config_, rope_, prompt, 0, k, v);
    auto pos = static_cast<Eigen::Index>(prompt.size());
    while (static_cast<int>(out.size()) < max_new) {
        const Matrix<S> lg = h.bottomRows(1) * w_.head.transpose();
        Eigen::Index best = 0;
        lg.row(0).maxCoeff(&best);
        const int tok = static_cast<int>(best);
        if (tok == stop_token) break;
        out.push_back(tok);
        if (pos >= config_.context_len) break;
        const int one[1] = {tok};
        h = infer_chunk(w_, config_, rope_, std::span<const int>(one, 1), pos, k, v);
        ++pos;
    }
    return out;
}

template <class S>
std::uint64_t ToyDecoder<S>::base_fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    visit([&](const std::string& name, const Matrix<S>& value, ParamKind kind) {
        if (kind != ParamKind::base) return;
        for (char ch : name) {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ULL;
        }
        const auto* bytes = reinterpret_cast<const unsigned char*>(value.data());
        const auto len = static_cast<std::size_t>(value.size()) * sizeof(S);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    });
    return h;
}

template class ToyDecoder<float>;
template class ToyDecoder<double>;

}  // namespace dstkit
