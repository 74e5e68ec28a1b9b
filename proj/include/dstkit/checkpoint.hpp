#pragma once

#include <string>

#include <json.hpp>

#include "dstkit/train.hpp"

namespace dstkit {

nlohmann::ordered_json config_to_json(const ToyDecoderConfig& config);
ToyDecoderConfig config_from_json(const nlohmann::json& doc);

struct LoadedModel {
    Model model;
    Tokenizer tokenizer;
};

// Binary container: "DSTKCKPT", u32 version, u64 header size, JSON header
// (kind, config, tokenizer, tensor directory), then little-endian f32 data.
// A full checkpoint holds the base weights and any attached adapters.
void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer);
LoadedModel load_checkpoint(const std::string& path);

// Adapter-only file, tagged with the base fingerprint it was trained on.
void save_adapter(const std::string& path, const Model& model);
// Attaches the stored adapters to `model`. Throws DataError if the base
// fingerprint or shapes do not match.
void load_adapter(const std::string& path, Model& model);

// Reads a checkpoint plus an optional standalone adapter, folds the adapters
// into the base weights and writes a fused checkpoint.
void merge_adapter_file(const std::string& base_path, const std::string& adapter_path,
                        const std::string& out_path);

}  // namespace dstkit
