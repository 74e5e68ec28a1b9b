#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dstkit {

/// Byte-level tokenizer with a handful of control tokens and the prompt
/// segment markers as single tokens. ids 0..255 are raw bytes.
class Tokenizer {
public:
    static constexpr int kPad = 256;
    static constexpr int kBos = 257;
    static constexpr int kEos = 258;
    static constexpr int kFirstSegment = 259;

    // Segment strings that encode to a single id each, longest match first.
    explicit Tokenizer(std::vector<std::string> segments = default_segments());

    static std::vector<std::string> default_segments();

    int vocab_size() const noexcept { return kFirstSegment + static_cast<int>(segments_.size()); }
    const std::vector<std::string>& segments() const noexcept { return segments_; }

    std::vector<int> encode(std::string_view text) const;
    // Control tokens decode to nothing; ids outside the vocabulary throw.
    std::string decode(std::span<const int> ids) const;
    std::size_t count(std::string_view text) const { return encode(text).size(); }

    friend bool operator==(const Tokenizer&, const Tokenizer&) = default;

private:
    std::vector<std::string> segments_;
    std::vector<std::size_t> by_length_;  // segment indices, longest first
};

}  // namespace dstkit
