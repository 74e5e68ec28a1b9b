#include "dstkit/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace dstkit {

Tokenizer::Tokenizer(std::vector<std::string> segments) : segments_(std::move(segments)) {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (segments_[i].empty()) {
            throw std::invalid_argument("tokenizer segment strings must be non-empty");
        }
        by_length_.push_back(i);
    }
    std::stable_sort(by_length_.begin(), by_length_.end(), [&](std::size_t a, std::size_t b) {
        return segments_[a].size() > segments_[b].size();
    });
}

std::vector<std::string> Tokenizer::default_segments() {
    return {"[SYSTEM]", "[USER]", "[domain]", "[slot]", "[Possible Values]"};
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    std::size_t pos = 0;
    while (pos < text.size()) {
        bool matched = false;
        for (std::size_t idx : by_length_) {
            const std::string& seg = segments_[idx];
            if (seg[0] == text[pos] && text.compare(pos, seg.size(), seg) == 0) {
                ids.push_back(kFirstSegment + static_cast<int>(idx));
                pos += seg.size();
                matched = true;
                break;
            }
        }
        if (!matched) {
            ids.push_back(static_cast<unsigned char>(text[pos]));
            ++pos;
        }
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && id < 256) {
            out += static_cast<char>(static_cast<unsigned char>(id));
        } else if (id >= kFirstSegment && id < vocab_size()) {
            out += segments_[static_cast<std::size_t>(id - kFirstSegment)];
        } else if (id != kPad && id != kBos && id != kEos) {
            throw std::out_of_range("token id outside vocabulary: " + std::to_string(id));
        }
    }
    return out;
}

}  // namespace dstkit
