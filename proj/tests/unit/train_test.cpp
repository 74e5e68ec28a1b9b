#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dstkit/checkpoint.hpp"
#include "dstkit/errors.hpp"
#include "dstkit/strings.hpp"
#include "dstkit/train.hpp"

using namespace dstkit;
namespace fs = std::filesystem;

namespace {

InstructionSample memo_sample() {
    InstructionSample s;
    s.instruction = "Track the dialogue state.";
    s.input = "[USER] i need a hotel in the north . So <hotel-area> is";
    s.output = "north";
    s.meta.dialogue_id = "d1";
    s.meta.turn_index = 1;
    s.meta.slot_id = "hotel-area";
    return s;
}

ToyDecoderConfig small_config() {
    ToyDecoderConfig c;
    c.context_len = 96;
    return c;
}

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("dstkit_unit_" + name)).string();
}

}  // namespace

TEST_CASE("encode_sample masks only the output and EOS targets") {
    const Tokenizer tok;
    const InstructionSample s = memo_sample();
    const TrainingSequence seq = encode_sample(s, tok, true);
    const std::size_t prompt_len = tok.encode(prompt_text(s)).size();
    REQUIRE(seq.tokens.size() == prompt_len + s.output.size() + 2);
    CHECK(seq.tokens.front() == Tokenizer::kBos);
    CHECK(seq.tokens.back() == Tokenizer::kEos);
    std::size_t masked = 0;
    for (auto m : seq.mask) masked += m;
    CHECK(masked == s.output.size() + 1);
    CHECK(seq.mask[prompt_len] == 1);
    CHECK(seq.mask[prompt_len - 1] == 0);
    CHECK(seq.mask.back() == 0);

    const TrainingSequence all = encode_sample(s, tok, false);
    std::size_t all_masked = 0;
    for (auto m : all.mask) all_masked += m;
    CHECK(all_masked == all.tokens.size() - 1);
}

TEST_CASE("single-sample memorization") {
    const Tokenizer tok;
    Model model(small_config(), 1);
    model.attach_adapters(2);
    std::vector<InstructionSample> data = {memo_sample()};
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 1;
    cfg.max_steps = 200;
    cfg.seed = 3;
    const TrainResult r = train(model, data, tok, cfg);
    REQUIRE(r.loss_trace.size() == 200);
    CHECK(r.loss_trace.back() < 0.05 * r.loss_trace.front());
    CHECK(predict_value(model, tok, data[0]) == "north");
    CHECK(predict_value(model, tok, data[0]) == predict_value(model, tok, data[0]));
    CHECK(predict_value(model, tok, data[0], 0).empty());
}

TEST_CASE("adapter training leaves the base weights bit-identical") {
    const Tokenizer tok;
    Model model(small_config(), 1);
    std::vector<Matrix<float>> before;
    model.visit([&](const std::string&, const Matrix<float>& v, ParamKind) { before.push_back(v); });
    const std::uint64_t fp = model.base_fingerprint();
    model.attach_adapters(2);
    std::vector<InstructionSample> data = {memo_sample()};
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 1;
    cfg.max_steps = 5;
    train(model, data, tok, cfg);
    CHECK(model.base_fingerprint() == fp);
    std::size_t i = 0;
    model.visit([&](const std::string&, const Matrix<float>& v, ParamKind kind) {
        if (kind == ParamKind::base) {
            CHECK(v == before.at(i));
            ++i;
        }
    });
    CHECK(i == before.size());
}

TEST_CASE("zero learning rate gives a constant loss trace") {
    const Tokenizer tok;
    Model model(small_config(), 1);
    model.attach_adapters(2);
    std::vector<InstructionSample> data = {memo_sample()};
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 1;
    cfg.max_steps = 10;
    const TrainResult r = train(model, data, tok, cfg);
    REQUIRE(r.loss_trace.size() == 10);
    for (double l : r.loss_trace) CHECK(l == r.loss_trace.front());
}

TEST_CASE("training is reproducible for a fixed seed") {
    const Tokenizer tok;
    std::vector<InstructionSample> data = {memo_sample(), memo_sample()};
    data[1].output = "NONE";
    data[1].meta.slot_id = "hotel-stars";
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 1;
    cfg.epochs = 3;
    cfg.seed = 9;
    Model a(small_config(), 1), b(small_config(), 1);
    a.attach_adapters(2);
    b.attach_adapters(2);
    CHECK(train(a, data, tok, cfg).loss_trace == train(b, data, tok, cfg).loss_trace);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("loss trace table") {
    CHECK(loss_trace_tsv({2.5, 1.25}) == "step\tloss\n1\t2.5\n2\t1.25\n");
}

TEST_CASE("checkpoint and adapter round trips") {
    const Tokenizer tok;
    Model model(small_config(), 1);
    model.attach_adapters(2);
    model.visit([](const std::string& name, Matrix<float>& v, ParamKind) {
        if (name.find("lora_B") != std::string::npos) v.setConstant(0.01f);
    });
    const std::vector<int> probe = {Tokenizer::kBos, 104, 105};
    const Matrix<float> expected = model.logits(probe);

    const std::string ckpt = temp_path("full.ckpt");
    save_checkpoint(ckpt, model, tok);
    LoadedModel loaded = load_checkpoint(ckpt);
    CHECK(loaded.tokenizer == tok);
    CHECK(loaded.model.has_adapters());
    CHECK(loaded.model.logits(probe) == expected);

    Model base(small_config(), 1);
    const std::string base_path = temp_path("base.ckpt");
    save_checkpoint(base_path, base, tok);
    const std::string adapter_path = temp_path("lora.adapter");
    save_adapter(adapter_path, model);
    LoadedModel reattached = load_checkpoint(base_path);
    CHECK_FALSE(reattached.model.has_adapters());
    load_adapter(adapter_path, reattached.model);
    CHECK(reattached.model.logits(probe) == expected);

    const std::string fused = temp_path("fused.ckpt");
    merge_adapter_file(base_path, adapter_path, fused);
    LoadedModel merged = load_checkpoint(fused);
    CHECK_FALSE(merged.model.has_adapters());
    CHECK((merged.model.logits(probe) - expected).cwiseAbs().maxCoeff() <= 1e-4f);

    Model other(small_config(), 77);
    CHECK_THROWS_AS(load_adapter(adapter_path, other), DataError);

    write_file(temp_path("junk.ckpt"), "not a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(temp_path("junk.ckpt")), DataError);
    for (const auto& p : {ckpt, base_path, adapter_path, fused, temp_path("junk.ckpt")}) fs::remove(p);
}
