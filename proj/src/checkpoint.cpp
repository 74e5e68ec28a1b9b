#include "dstkit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "dstkit/errors.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'D', 'S', 'T', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get(std::string_view data, std::size_t& pos) {
    if (pos + sizeof(T) > data.size()) throw DataError("checkpoint truncated");
    T value;
    std::memcpy(&value, data.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

std::string write_container(ordered_json header,
                            const std::vector<std::pair<std::string, const Matrix<float>*>>& tensors) {
    ordered_json dir = ordered_json::array();
    std::size_t offset = 0;
    for (const auto& [name, m] : tensors) {
        dir.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
        offset += static_cast<std::size_t>(m->size());
    }
    header["dtype"] = "f32";
    header["tensors"] = std::move(dir);
    const std::string text = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& [name, m] : tensors) {
        out.append(reinterpret_cast<const char*>(m->data()), static_cast<std::size_t>(m->size()) * sizeof(float));
    }
    return out;
}

struct Container {
    json header;
    std::map<std::string, Matrix<float>> tensors;
};

Container read_container(const std::string& path) {
    const std::string data = read_file(path);
    if (data.size() < sizeof(kMagic) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
        throw DataError(path + ": not a checkpoint file");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = get<std::uint32_t>(data, pos);
    if (version != kVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = get<std::uint64_t>(data, pos);
    if (pos + hlen > data.size()) throw DataError(path + ": checkpoint truncated");
    Container c;
    try {
        c.header = json::parse(std::string_view(data).substr(pos, hlen));
    } catch (const json::exception& e) {
        throw DataError(path + ": bad checkpoint header: " + e.what());
    }
    pos += hlen;
    const std::size_t base = pos;
    const std::size_t floats = (data.size() - base) / sizeof(float);
    for (const auto& t : c.header.at("tensors")) {
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto off = t.at("offset").get<std::size_t>();
        if (rows < 0 || cols < 0 || off + static_cast<std::size_t>(rows * cols) > floats) {
            throw DataError(path + ": tensor " + t.at("name").get<std::string>() + " out of bounds");
        }
        Matrix<float> m(rows, cols);
        std::memcpy(m.data(), data.data() + base + off * sizeof(float),
                    static_cast<std::size_t>(m.size()) * sizeof(float));
        c.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    return c;
}

void assign_tensors(Model& model, std::map<std::string, Matrix<float>>& tensors, bool adapters_only,
                    const std::string& path) {
    model.visit([&](const std::string& name, Matrix<float>& value, ParamKind kind) {
        if (adapters_only && kind != ParamKind::adapter) return;
        auto it = tensors.find(name);
        if (it == tensors.end()) throw DataError(path + ": missing tensor " + name);
        if (it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
            throw DataError(path + ": shape mismatch for " + name);
        }
        value = std::move(it->second);
        tensors.erase(it);
    });
    if (!tensors.empty()) throw DataError(path + ": unexpected tensor " + tensors.begin()->first);
}

bool has_adapter_tensors(const std::map<std::string, Matrix<float>>& tensors) {
    for (const auto& [name, m] : tensors) {
        if (name.find(".lora_") != std::string::npos) return true;
    }
    return false;
}

}  // namespace

ordered_json config_to_json(const ToyDecoderConfig& c) {
    ordered_json targets = ordered_json::array();
    for (Projection p : c.target_modules) targets.push_back(to_string(p));
    return {{"vocab_size", c.vocab_size},   {"model_dim", c.model_dim},
            {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
            {"context_len", c.context_len}, {"mlp_ratio", c.mlp_ratio},
            {"target_modules", targets},
            {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}}}};
}

ToyDecoderConfig config_from_json(const json& doc) {
    ToyDecoderConfig c;
    try {
        c.vocab_size = doc.value("vocab_size", c.vocab_size);
        c.model_dim = doc.value("model_dim", c.model_dim);
        c.n_layers = doc.value("n_layers", c.n_layers);
        c.n_heads = doc.value("n_heads", c.n_heads);
        c.context_len = doc.value("context_len", c.context_len);
        c.mlp_ratio = doc.value("mlp_ratio", c.mlp_ratio);
        if (doc.contains("target_modules")) {
            c.target_modules.clear();
            for (const auto& t : doc.at("target_modules")) {
                c.target_modules.push_back(projection_from_string(t.get<std::string>()));
            }
        }
        if (doc.contains("lora")) {
            const auto& l = doc.at("lora");
            c.lora.rank = l.value("rank", c.lora.rank);
            c.lora.alpha = l.value("alpha", c.lora.alpha);
            c.lora.dropout = l.value("dropout", c.lora.dropout);
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("bad decoder config: ") + e.what());
    }
    return c;
}

void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer) {
    ordered_json header;
    header["kind"] = "model";
    header["config"] = config_to_json(model.config());
    header["tokenizer"] = {{"type", "byte"}, {"segments", tokenizer.segments()}};
    header["base_fingerprint"] = hex64(model.base_fingerprint());
    std::vector<std::pair<std::string, const Matrix<float>*>> tensors;
    model.visit([&](const std::string& name, const Matrix<float>& value, ParamKind) {
        tensors.emplace_back(name, &value);
    });
    write_file(path, write_container(std::move(header), tensors));
}

LoadedModel load_checkpoint(const std::string& path) {
    Container c = read_container(path);
    if (c.header.value("kind", "") != "model") throw DataError(path + ": not a model checkpoint");
    ToyDecoderConfig cfg = config_from_json(c.header.at("config"));
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(path + ": " + e.what());
    }
    std::vector<std::string> segments = c.header.at("tokenizer").at("segments").get<std::vector<std::string>>();
    LoadedModel out{Model(cfg, 0), Tokenizer(std::move(segments))};
    if (out.tokenizer.vocab_size() != cfg.vocab_size) {
        throw DataError(path + ": tokenizer vocabulary does not match the model");
    }
    if (has_adapter_tensors(c.tensors)) out.model.attach_adapters(0);
    assign_tensors(out.model, c.tensors, false, path);
    return out;
}

void save_adapter(const std::string& path, const Model& model) {
    if (!model.has_adapters()) throw std::invalid_argument("model has no adapters to save");
    ordered_json header;
    header["kind"] = "adapter";
    header["config"] = config_to_json(model.config());
    header["base_fingerprint"] = hex64(model.base_fingerprint());
    std::vector<std::pair<std::string, const Matrix<float>*>> tensors;
    model.visit([&](const std::string& name, const Matrix<float>& value, ParamKind kind) {
        if (kind == ParamKind::adapter) tensors.emplace_back(name, &value);
    });
    write_file(path, write_container(std::move(header), tensors));
}

void load_adapter(const std::string& path, Model& model) {
    Container c = read_container(path);
    if (c.header.value("kind", "") != "adapter") throw DataError(path + ": not an adapter file");
    const std::string want = c.header.at("base_fingerprint").get<std::string>();
    if (want != hex64(model.base_fingerprint())) {
        throw DataError(path + ": adapter was trained on a different base model");
    }
    const ToyDecoderConfig stored = config_from_json(c.header.at("config"));
    Model& m = model;
    ToyDecoderConfig cfg = m.config();
    if (stored.model_dim != cfg.model_dim || stored.n_layers != cfg.n_layers) {
        throw DataError(path + ": adapter shape does not match the model");
    }
    // the adapter file's LoRA settings and targets win
    cfg.lora = stored.lora;
    cfg.target_modules = stored.target_modules;
    Model rebuilt(cfg, 0);
    rebuilt.weights() = m.weights();
    rebuilt.drop_adapters();
    rebuilt.attach_adapters(0);
    assign_tensors(rebuilt, c.tensors, true, path);
    model = std::move(rebuilt);
}

void merge_adapter_file(const std::string& base_path, const std::string& adapter_path,
                        const std::string& out_path) {
    LoadedModel lm = load_checkpoint(base_path);
    if (!adapter_path.empty()) load_adapter(adapter_path, lm.model);
    if (!lm.model.has_adapters()) throw UsageError("no adapters to merge");
    lm.model.merge_adapters();
    save_checkpoint(out_path, lm.model, lm.tokenizer);
}

}  // namespace dstkit
