#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "dstkit/keyed_rng.hpp"

namespace dstkit {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Low-rank update delta_W = B * A for a d x k weight, applied with
/// scaling alpha / r. A is r x k, B is d x r.
template <class S>
struct LoraAdapter {
    Matrix<S> A;
    Matrix<S> B;
    int rank = 0;
    S alpha = S(0);
    S dropout_p = S(0);

    S scaling() const { return alpha / static_cast<S>(rank); }
};

/// A d x k projection whose base weight W0 stays frozen while an optional
/// adapter is trained.
template <class S>
struct LoraLinear {
    Matrix<S> W0;
    std::optional<LoraAdapter<S>> adapter;

    Eigen::Index out_features() const { return W0.rows(); }
    Eigen::Index in_features() const { return W0.cols(); }
};

inline void check_rank(long d, long k, int r) {
    if (r < 1 || 2L * r > std::min(d, k)) {
        throw std::invalid_argument("LoRA rank " + std::to_string(r) +
                                    " violates 1 <= r <= min(d, k) / 2 for d=" +
                                    std::to_string(d) + ", k=" + std::to_string(k));
    }
}

// B = 0, A ~ N(0, 0.02^2) from a seeded stream.
template <class S>
LoraAdapter<S> init_adapter(long d, long k, int r, S alpha, std::uint64_t seed,
                            S dropout_p = S(0)) {
    check_rank(d, k, r);
    if (!(dropout_p >= S(0) && dropout_p < S(1))) {
        throw std::invalid_argument("adapter dropout must lie in [0, 1)");
    }
    LoraAdapter<S> ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.A.resize(r, k);
    ad.B = Matrix<S>::Zero(d, r);
    SplitMix64 rng(seed);
    for (Eigen::Index i = 0; i < ad.A.size(); ++i) {
        ad.A.data()[i] = static_cast<S>(0.02 * rng.gaussian());
    }
    return ad;
}

// h = W0 x + scaling * B (A x). Inference path: no dropout.
template <class S>
Vector<S> lora_forward(const LoraLinear<S>& layer, const Vector<S>& x) {
    if (x.size() != layer.in_features()) {
        throw std::invalid_argument("lora_forward: input has " + std::to_string(x.size()) +
                                    " entries, layer expects " +
                                    std::to_string(layer.in_features()));
    }
    Vector<S> h = layer.W0 * x;
    if (layer.adapter) {
        const LoraAdapter<S>& ad = *layer.adapter;
        const Vector<S> down = ad.A * x;
        h.noalias() += ad.scaling() * (ad.B * down);
    }
    return h;
}

// W0 + scaling * B A.
template <class S>
Matrix<S> merge(const LoraLinear<S>& layer) {
    Matrix<S> w = layer.W0;
    if (layer.adapter) {
        const LoraAdapter<S>& ad = *layer.adapter;
        w.noalias() += ad.scaling() * (ad.B * ad.A);
    }
    return w;
}

// ---- row-batched forward/backward (rows are sequence positions) -----------

template <class S>
struct LoraRowsCache {
    Matrix<S> input;        // X, n x k
    Matrix<S> keep;         // dropout multipliers (empty when no dropout)
    Matrix<S> down;         // (X * keep) A^T, n x r
};

template <class S>
struct LoraGrads {
    Matrix<S> dW0;
    Matrix<S> dA;
    Matrix<S> dB;

    void zero_like(const LoraLinear<S>& layer) {
        dW0 = Matrix<S>::Zero(layer.W0.rows(), layer.W0.cols());
        if (layer.adapter) {
            dA = Matrix<S>::Zero(layer.adapter->A.rows(), layer.adapter->A.cols());
            dB = Matrix<S>::Zero(layer.adapter->B.rows(), layer.adapter->B.cols());
        } else {
            dA.resize(0, 0);
            dB.resize(0, 0);
        }
    }
};

// Y = X W0^T + s (D(X) A^T) B^T, with D the inverted-dropout mask when
// `dropout_rng` is given and the adapter has dropout_p > 0.
template <class S>
Matrix<S> lora_forward_rows(const LoraLinear<S>& layer, const Matrix<S>& X,
                            LoraRowsCache<S>* cache, SplitMix64* dropout_rng) {
    Matrix<S> Y = X * layer.W0.transpose();
    if (!layer.adapter) {
        if (cache != nullptr) {
            cache->input = X;
        }
        return Y;
    }
    const LoraAdapter<S>& ad = *layer.adapter;
    Matrix<S> keep;
    Matrix<S> down;
    if (dropout_rng != nullptr && ad.dropout_p > S(0)) {
        keep.resize(X.rows(), X.cols());
        const S inv = S(1) / (S(1) - ad.dropout_p);
        for (Eigen::Index i = 0; i < keep.size(); ++i) {
            keep.data()[i] = dropout_rng->uniform() < static_cast<double>(ad.dropout_p) ? S(0) : inv;
        }
        down = X.cwiseProduct(keep) * ad.A.transpose();
    } else {
        down = X * ad.A.transpose();
    }
    Y.noalias() += ad.scaling() * (down * ad.B.transpose());
    if (cache != nullptr) {
        cache->input = X;
        cache->keep = std::move(keep);
        cache->down = std::move(down);
    }
    return Y;
}

// Accumulates parameter gradients and returns dL/dX. dW0 is only
// accumulated when `base_trainable`.
template <class S>
Matrix<S> lora_backward_rows(const LoraLinear<S>& layer, const LoraRowsCache<S>& cache,
                             const Matrix<S>& dY, LoraGrads<S>& grads, bool base_trainable) {
    Matrix<S> dX = dY * layer.W0;
    if (base_trainable) {
        grads.dW0.noalias() += dY.transpose() * cache.input;
    }
    if (!layer.adapter) {
        return dX;
    }
    const LoraAdapter<S>& ad = *layer.adapter;
    const S s = ad.scaling();
    const Matrix<S> dDown = s * (dY * ad.B);  // n x r
    grads.dB.noalias() += s * (dY.transpose() * cache.down);
    if (cache.keep.size() > 0) {
        const Matrix<S> dropped = cache.input.cwiseProduct(cache.keep);
        grads.dA.noalias() += dDown.transpose() * dropped;
        dX.noalias() += (dDown * ad.A).cwiseProduct(cache.keep);
    } else {
        grads.dA.noalias() += dDown.transpose() * cache.input;
        dX.noalias() += dDown * ad.A;
    }
    return dX;
}

// ---- gradient check -----------------------------------------------------

// Scalar probe loss L(h) = sum_i w_i h_i + 0.5 * |h|^2 with fixed weights
// w_i = sin(i + 1); dL/dh = w + h.
template <class S>
S probe_loss(const Vector<S>& h) {
    S loss = S(0);
    for (Eigen::Index i = 0; i < h.size(); ++i) {
        loss += std::sin(static_cast<S>(i + 1)) * h[i] + S(0.5) * h[i] * h[i];
    }
    return loss;
}

template <class S>
Vector<S> probe_loss_grad(const Vector<S>& h) {
    Vector<S> g(h.size());
    for (Eigen::Index i = 0; i < h.size(); ++i) {
        g[i] = std::sin(static_cast<S>(i + 1)) + h[i];
    }
    return g;
}

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

// Analytic dL/dA, dL/dB of the probe loss against central differences.
// Per-entry relative error is |a - n| / max(|a| + |n|, 1e-10).
inline GradCheckReport grad_check_report(const LoraLinear<double>& layer,
                                         const Vector<double>& x, double eps = 1e-6) {
    if (!layer.adapter) {
        throw std::invalid_argument("grad_check needs a layer with an adapter");
    }
    const Vector<double> g = probe_loss_grad(lora_forward(layer, x));
    const LoraAdapter<double>& ad = *layer.adapter;
    const double s = ad.scaling();
    const Matrix<double> dA = s * (ad.B.transpose() * g) * x.transpose();
    const Matrix<double> dB = s * g * (ad.A * x).transpose();

    GradCheckReport report;
    LoraLinear<double> probe = layer;
    auto check = [&](Matrix<double>& param, const Matrix<double>& analytic) {
        for (Eigen::Index i = 0; i < param.size(); ++i) {
            const double saved = param.data()[i];
            param.data()[i] = saved + eps;
            const double up = probe_loss(lora_forward(probe, x));
            param.data()[i] = saved - eps;
            const double down = probe_loss(lora_forward(probe, x));
            param.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.data()[i];
            const double abs_err = std::abs(a - numeric);
            const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-10);
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
        }
    };
    check(probe.adapter->A, dA);
    check(probe.adapter->B, dB);
    return report;
}

inline double grad_check(const LoraLinear<double>& layer, const Vector<double>& x,
                         double eps = 1e-6) {
    return grad_check_report(layer, x, eps).max_rel_error;
}

// ---- parameter accounting --------------------------------------------------

struct ParamCount {
    std::int64_t trainable = 0;
    std::int64_t total = 0;
    double ratio = 0.0;
};

// trainable = n_layers * n_modules * r * (d_in + d_out); total = base + trainable.
inline ParamCount count_lora_params(std::int64_t n_layers, std::int64_t n_modules,
                                    std::int64_t rank, std::int64_t d_in, std::int64_t d_out,
                                    std::int64_t base_total) {
    ParamCount c;
    c.trainable = n_layers * n_modules * rank * (d_in + d_out);
    c.total = base_total + c.trainable;
    c.ratio = c.total > 0 ? static_cast<double>(c.trainable) / static_cast<double>(c.total) : 0.0;
    return c;
}

}  // namespace dstkit
