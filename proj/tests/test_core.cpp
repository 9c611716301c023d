#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"
#include "pairforge/types.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

using namespace pairforge;
using testutil::TempDir;

TEST_CASE("rng: splitmix64 reference stream") {
    // First outputs of the published splitmix64 reference for seed 0.
    Rng rng(0);
    CHECK(rng.next_u64() == 0xe220a8397b1dcdafULL);
    CHECK(rng.next_u64() == 0x6e789e6aa1b965f4ULL);
    CHECK(rng.next_u64() == 0x06c45d188009454fULL);
}

TEST_CASE("rng: same seed same stream, different seed different stream") {
    Rng a(42), b(42), c(43);
    bool all_equal = true;
    bool any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t x = a.next_u64();
        all_equal = all_equal && (x == b.next_u64());
        any_diff = any_diff || (x != c.next_u64());
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("rng: next_unit stays in [0,1)") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.next_unit();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("rng: next_below bounds and rough uniformity") {
    Rng rng(11);
    std::vector<int> counts(10, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const std::uint64_t x = rng.next_below(10);
        REQUIRE(x < 10);
        ++counts[static_cast<std::size_t>(x)];
    }
    for (const int c : counts) {
        CHECK(c > draws / 10 - draws / 50);  // 10% +- 2%
        CHECK(c < draws / 10 + draws / 50);
    }
}

TEST_CASE("rng: gaussian moments") {
    Rng rng(3);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double g = rng.next_gaussian();
        sum += g;
        sq += g * g;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("rng: shuffle is deterministic per seed and a permutation") {
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    std::vector<int> w = v;
    Rng(5).shuffle(v);
    Rng(5).shuffle(w);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("rng: sample_without_replacement") {
    SUBCASE("k == n takes everything in ascending order without consuming randomness") {
        Rng a(9), b(10);
        const auto sa = a.sample_without_replacement(5, 5);
        const auto sb = b.sample_without_replacement(5, 5);
        CHECK(sa == sb);
        for (std::size_t i = 0; i < 5; ++i) CHECK(sa[i] == i);
        // The generator state was untouched: next draws match a fresh engine.
        CHECK(a.next_u64() == Rng(9).next_u64());
    }
    SUBCASE("k < n yields k distinct indices below n") {
        Rng rng(13);
        for (int trial = 0; trial < 200; ++trial) {
            const auto s = rng.sample_without_replacement(9, 5);
            REQUIRE(s.size() == 5);
            std::set<std::size_t> uniq(s.begin(), s.end());
            CHECK(uniq.size() == 5);
            for (const auto idx : s) CHECK(idx < 9);
        }
    }
    SUBCASE("different seeds can select differently") {
        int differing = 0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            const auto a = Rng(s).sample_without_replacement(9, 5);
            const auto b = Rng(s + 1000).sample_without_replacement(9, 5);
            if (a != b) ++differing;
        }
        CHECK(differing > 0);
    }
}

TEST_CASE("hash64: FNV-1a reference vectors") {
    CHECK(hash64("") == 0xcbf29ce484222325ULL);
    CHECK(hash64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(hash64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("mix_seed is order-dependent") {
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
    CHECK(mix_seed(0, 0) == mix_seed(0, 0));
}

TEST_CASE("derive_seed separates labeled substreams") {
    const std::uint64_t base = 77;
    CHECK(derive_seed(base, "mine") != derive_seed(base, "annotate"));
    CHECK(derive_seed(base, "mine", "a") != derive_seed(base, "mine", "b"));
    CHECK(derive_seed(base, "mine", "a") == derive_seed(base, "mine", "a"));
}

TEST_CASE("similarity band: open interval semantics") {
    const SimilarityBand band{0.8, 0.96};
    CHECK(band.valid());
    CHECK_FALSE(band.contains(0.8));
    CHECK_FALSE(band.contains(0.96));
    CHECK(band.contains(0.800001));
    CHECK(band.contains(0.959999));
    CHECK_FALSE(SimilarityBand{0.9, 0.9}.valid());
    CHECK_FALSE(SimilarityBand{0.96, 0.8}.valid());
    CHECK_FALSE(SimilarityBand{-1.5, 0.5}.valid());
    CHECK(SimilarityBand{-1.0, 1.0}.valid());
}

TEST_CASE("space tags: round trip and rejection") {
    for (const SpaceTag tag : kAllSpaces) {
        const auto back = space_from_string(to_string(tag));
        REQUIRE(back.has_value());
        CHECK(*back == tag);
    }
    CHECK(to_string(SpaceTag::VisualSemantic) == "vsem");
    CHECK(to_string(SpaceTag::VisualPattern) == "vpat");
    CHECK(to_string(SpaceTag::CaptionText) == "ctxt");
    CHECK_FALSE(space_from_string("visual").has_value());
    CHECK_FALSE(space_from_string("").has_value());
}

TEST_CASE("errors: carry their code and a readable name") {
    const Error err(Errc::DuplicateId, "item x");
    CHECK(err.code() == Errc::DuplicateId);
    CHECK(std::string(err.what()).find("item x") != std::string::npos);

    // Every code renders to a distinct non-empty name.
    std::set<std::string> names;
    for (int c = 0; c <= static_cast<int>(Errc::IoError); ++c) {
        const std::string name{to_string(static_cast<Errc>(c))};
        CHECK_FALSE(name.empty());
        names.insert(name);
    }
    CHECK(names.size() == static_cast<std::size_t>(Errc::IoError) + 1);
}

TEST_CASE("io: file round trip and digests") {
    TempDir tmp;
    const auto path = tmp.path / "nested" / "dir" / "file.txt";
    write_file(path, "hello\nworld\n");
    CHECK(read_file(path) == "hello\nworld\n");
    CHECK(digest_file(path) == digest_bytes("hello\nworld\n"));

    // FNV-1a of the empty string is the offset basis.
    CHECK(digest_bytes("") == "fnv1a64:cbf29ce484222325");
    CHECK(digest_bytes("a") != digest_bytes("b"));
}

TEST_CASE("io: read_file on a missing path raises IoError") {
    CHECK(testutil::thrown_code([] { read_file("/nonexistent/pf-test-file"); }) == Errc::IoError);
}

TEST_CASE("io: read_json parses and rejects") {
    TempDir tmp;
    write_file(tmp.path / "ok.json", R"({"k": [1, 2]})");
    const nlohmann::json j = read_json(tmp.path / "ok.json");
    CHECK(j.at("k").size() == 2);

    write_file(tmp.path / "bad.json", "{nope");
    CHECK(testutil::thrown_code([&] { read_json(tmp.path / "bad.json"); }) ==
          Errc::MalformedRecord);
}

TEST_CASE("io: for_each_line numbers lines and skips empties") {
    TempDir tmp;
    write_file(tmp.path / "lines.txt", "one\n\ntwo\n\n\nthree");
    std::vector<std::pair<std::size_t, std::string>> seen;
    for_each_line(tmp.path / "lines.txt",
                  [&](std::size_t no, const std::string& line) { seen.emplace_back(no, line); });
    REQUIRE(seen.size() == 3);
    CHECK(seen[0] == std::pair<std::size_t, std::string>{1, "one"});
    CHECK(seen[1] == std::pair<std::size_t, std::string>{3, "two"});
    CHECK(seen[2] == std::pair<std::size_t, std::string>{6, "three"});
}
