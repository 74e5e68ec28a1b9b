#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dstkit/corpus.hpp"

namespace dstkit {

enum class SourceFormat : std::uint8_t { sgd, multiwoz };

SourceFormat source_format_from_string(std::string_view name);

struct ConvertResult {
    Schema schema;
    std::vector<Dialogue> dialogues;
    Warnings warnings;
};

// Native SGD / MultiWOZ 2.2 layouts: a schema.json list of services and
// dialogue files holding lists of {dialogue_id, services, turns[{speaker,
// utterance, frames[{service, state.slot_values}]}]}. Each user turn is paired
// with the system turn before it; per-service states carry forward across
// turns whose frames omit the service. MultiWOZ slot names lose their
// "domain-" prefix. State entries naming slots missing from the schema are
// dropped with a warning.
ConvertResult convert_corpus(SourceFormat format, std::string_view schema_document,
                             std::span<const std::string> dialogue_documents);

}  // namespace dstkit
