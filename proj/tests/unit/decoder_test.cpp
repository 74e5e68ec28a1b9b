#include <doctest.h>

#include <cmath>

#include "dstkit/decoder.hpp"

using namespace dstkit;

namespace {

ToyDecoderConfig tiny_config() {
    ToyDecoderConfig c;
    c.vocab_size = 20;
    c.model_dim = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.context_len = 12;
    c.mlp_ratio = 2;
    c.lora = {2, 4.0, 0.0};
    return c;
}

const std::vector<int> kTokens = {1, 5, 7, 3, 9, 2, 11, 4, 6, 0};
const std::vector<std::uint8_t> kMask = {1, 1, 0, 1, 1, 1, 0, 1, 1, 0};

double worst_fd_error(ToyDecoder<double>& m) {
    m.zero_grad();
    m.forward_backward(kTokens, kMask, 1.0, nullptr);
    double worst = 0.0;
    m.visit_trainable([&](const std::string&, Matrix<double>& v, Matrix<double>& g, ParamKind) {
        const Eigen::Index stride = std::max<Eigen::Index>(1, v.size() / 9);
        for (Eigen::Index i = 0; i < v.size(); i += stride) {
            const double s = v.data()[i];
            v.data()[i] = s + 1e-6;
            const double up = m.loss(kTokens, kMask);
            v.data()[i] = s - 1e-6;
            const double dn = m.loss(kTokens, kMask);
            v.data()[i] = s;
            const double num = (up - dn) / 2e-6;
            const double a = g.data()[i];
            worst = std::max(worst, std::abs(a - num) / std::max(std::abs(a) + std::abs(num), 1e-8));
        }
    });
    return worst;
}

}  // namespace

TEST_CASE("nll_loss limits and oracle") {
    Matrix<double> uniform = Matrix<double>::Zero(3, 7);
    std::vector<int> t = {0, 3, 6};
    std::vector<std::uint8_t> all = {1, 1, 1};
    CHECK(nll_loss(uniform, t, all) == doctest::Approx(std::log(7.0)).epsilon(1e-14));

    Matrix<double> peaked = Matrix<double>::Zero(3, 7);
    for (int i = 0; i < 3; ++i) peaked(i, t[static_cast<std::size_t>(i)]) = 200.0;
    CHECK(nll_loss(peaked, t, all) < 1e-12);

    Matrix<double> logits(3, 4);
    logits << 0.3, -1.2, 2.0, 0.5, 1.1, 0.0, -0.4, 0.9, -2.0, 0.7, 0.1, 0.2;
    std::vector<int> targets = {2, 0, 3};
    std::vector<std::uint8_t> mask = {1, 0, 1};
    double expect = 0.0;
    for (int i : {0, 2}) {
        double z = 0.0;
        for (int j = 0; j < 4; ++j) z += std::exp(logits(i, j));
        expect += -(logits(i, targets[static_cast<std::size_t>(i)]) - std::log(z));
    }
    expect /= 2.0;
    CHECK(std::abs(nll_loss(logits, targets, mask) - expect) <= 1e-12);

    std::vector<std::uint8_t> none = {0, 0, 0};
    CHECK_THROWS_AS(nll_loss(logits, targets, none), std::invalid_argument);
}

TEST_CASE("config validation") {
    ToyDecoderConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    CHECK_THROWS_AS(c.validate(13), std::invalid_argument);
    CHECK_NOTHROW(c.validate(12));
    c.lora.rank = 9;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("projection names") {
    CHECK(projection_from_string("q") == Projection::q);
    CHECK(projection_from_string("v_proj") == Projection::v);
    CHECK(to_string(Projection::o) == "o");
    CHECK_THROWS_AS(projection_from_string("gate"), std::invalid_argument);
}

TEST_CASE("full-network gradients match finite differences") {
    ToyDecoder<double> m(tiny_config(), 3);
    CHECK(worst_fd_error(m) <= 1e-4);
}

TEST_CASE("adapter gradients match finite differences") {
    ToyDecoder<double> m(tiny_config(), 3);
    m.attach_adapters(5);
    m.visit([](const std::string& name, Matrix<double>& v, ParamKind) {
        if (name.find("lora_B") != std::string::npos) {
            for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = 0.05 * std::sin(static_cast<double>(i) + 1.0);
        }
    });
    CHECK(worst_fd_error(m) <= 1e-4);
}

TEST_CASE("freshly attached adapters do not change the logits") {
    ToyDecoder<double> m(tiny_config(), 3);
    const Matrix<double> before = m.logits(kTokens);
    m.attach_adapters(17);
    CHECK(m.has_adapters());
    CHECK(m.logits(kTokens) == before);
}

TEST_CASE("trainable count follows the adapter formula") {
    ToyDecoderConfig c = tiny_config();
    c.target_modules = {Projection::q, Projection::v};
    ToyDecoder<double> m(c, 1);
    CHECK(m.trainable_parameter_count() == m.parameter_count());
    CHECK(m.parameter_count() == count_base_params(c));
    m.attach_adapters(2);
    std::int64_t brute = 0;
    m.visit([&](const std::string&, const Matrix<double>& v, ParamKind kind) {
        if (kind == ParamKind::adapter) brute += v.size();
    });
    const ParamCount pc = count_trainable(c);
    CHECK(brute == pc.trainable);
    CHECK(m.trainable_parameter_count() == pc.trainable);
    CHECK(pc.trainable == 2 * 2 * 2 * (16 + 16));
    CHECK(pc.total == count_base_params(c) + pc.trainable);

    ToyDecoderConfig toy;
    toy.n_layers = 2;
    toy.target_modules = {Projection::q, Projection::v};
    toy.lora.rank = 4;
    CHECK(count_trainable(toy).trainable == 2048);
}

TEST_CASE("merging folds adapters without changing the function") {
    ToyDecoder<double> m(tiny_config(), 3);
    m.attach_adapters(5);
    m.visit([](const std::string& name, Matrix<double>& v, ParamKind) {
        if (name.find("lora_B") != std::string::npos) v.setConstant(0.03);
    });
    const Matrix<double> adapted = m.logits(kTokens);
    const std::uint64_t fp = m.base_fingerprint();
    m.merge_adapters();
    CHECK_FALSE(m.has_adapters());
    CHECK(m.base_fingerprint() != fp);
    CHECK((m.logits(kTokens) - adapted).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("cached greedy decoding matches full recomputation") {
    ToyDecoder<double> m(tiny_config(), 9);
    const std::vector<int> prompt = {3, 4, 5};
    const auto out = m.greedy(prompt, 6, -1);
    REQUIRE(out.size() == 6);
    std::vector<int> seq = prompt;
    for (int tok : out) {
        const Matrix<double> lg = m.logits(seq);
        Eigen::Index best = 0;
        lg.row(lg.rows() - 1).maxCoeff(&best);
        CHECK(tok == static_cast<int>(best));
        seq.push_back(tok);
    }
    CHECK(m.greedy(prompt, 6, -1) == out);
    CHECK(m.greedy(prompt, 0, -1).empty());
}

TEST_CASE("inputs longer than the context are rejected") {
    ToyDecoder<double> m(tiny_config(), 1);
    std::vector<int> too_long(13, 1);
    CHECK_THROWS_AS(m.logits(too_long), std::invalid_argument);
    std::vector<int> bad = {1, 99};
    CHECK_THROWS_AS(m.logits(bad), std::invalid_argument);
}

TEST_CASE("weights are seeded deterministically") {
    ToyDecoder<float> a(tiny_config(), 4);
    ToyDecoder<float> b(tiny_config(), 4);
    ToyDecoder<float> c(tiny_config(), 5);
    CHECK(a.base_fingerprint() == b.base_fingerprint());
    CHECK(a.base_fingerprint() != c.base_fingerprint());
}
