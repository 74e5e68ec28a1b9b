#include <doctest.h>

#include "dstkit/keyed_rng.hpp"
#include "dstkit/strings.hpp"
#include "dstkit/tokenizer.hpp"

using namespace dstkit;

TEST_CASE("empty text") {
    const Tokenizer tok;
    CHECK(tok.encode("").empty());
    CHECK(tok.decode(tok.encode("")).empty());
}

TEST_CASE("segment markers are single tokens") {
    const Tokenizer tok;
    const auto ids = tok.encode("[USER] hi");
    REQUIRE(ids.size() == 4);
    CHECK(ids[0] >= Tokenizer::kFirstSegment);
    CHECK(tok.decode(ids) == "[USER] hi");
    CHECK(tok.vocab_size() == 264);
    CHECK(tok.encode("[Possible Values]").size() == 1);
}

TEST_CASE("random byte strings round trip") {
    const Tokenizer tok;
    SplitMix64 rng(99);
    const std::vector<std::string> pieces = {"[USER]", "[SYSTEM]", "[slot]", "[", "]", "USER"};
    for (int trial = 0; trial < 50; ++trial) {
        std::string text;
        while (text.size() < 1000) {
            if (rng.coin(0.05)) {
                text += pieces[rng.below(pieces.size())];
            } else {
                text += static_cast<char>(rng.below(256));
            }
        }
        CHECK(tok.decode(tok.encode(text)) == text);
    }
}

TEST_CASE("special ids decode to nothing") {
    const Tokenizer tok;
    std::vector<int> ids = {Tokenizer::kBos, 'a', Tokenizer::kPad, 'b', Tokenizer::kEos};
    CHECK(tok.decode(ids) == "ab");
}

TEST_CASE("string helpers") {
    CHECK(trim("  a b \n") == "a b");
    CHECK(to_lower("AbC") == "abc");
    CHECK(split("a,,b", ',') == std::vector<std::string>{"a", "", "b"});
    CHECK(join({"x", "y"}, ", ") == "x, y");
    CHECK(collapse_spaces("a   b \t c") == "a b c");
    CHECK(starts_with_icase("The value", "the"));
}

TEST_CASE("keyed seeds separate streams") {
    CHECK(keyed_seed(1, {"a", "b"}) == keyed_seed(1, {"a", "b"}));
    CHECK(keyed_seed(1, {"a", "b"}) != keyed_seed(1, {"ab"}));
    CHECK(keyed_seed(1, {"a"}) != keyed_seed(2, {"a"}));
    SplitMix64 rng(5);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        CHECK(rng.below(7) < 7);
    }
}
