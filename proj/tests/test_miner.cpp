#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pairforge/corpus.hpp"
#include "pairforge/io.hpp"
#include "pairforge/miner.hpp"
#include "pairforge/rng.hpp"
#include "pairforge/simindex.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

using namespace pairforge;
using testutil::TempDir;
using testutil::thrown_code;

namespace {

/// Corpus where "q" has `in_band` neighbors at cosine 0.9 plus one
/// near-duplicate (0.99) and one weak neighbor (0.5), all unit vectors:
/// v_i = c*q + sqrt(1-c^2)*e_i over distinct orthogonal axes.
Corpus banded_corpus(int in_band) {
    const Eigen::Index dim = static_cast<Eigen::Index>(in_band) + 4;
    std::vector<std::pair<std::string, Eigen::VectorXd>> rows;
    Eigen::VectorXd q = Eigen::VectorXd::Zero(dim);
    q[0] = 1.0;
    rows.emplace_back("q", q);
    const auto at_cosine = [&](double c, Eigen::Index axis) {
        Eigen::VectorXd v = c * q;
        v[axis] = std::sqrt(1.0 - c * c);
        return v;
    };
    for (int i = 0; i < in_band; ++i) {
        rows.emplace_back("t" + std::to_string(i + 1),
                          at_cosine(0.9, static_cast<Eigen::Index>(i) + 1));
    }
    rows.emplace_back("dup", at_cosine(0.99, dim - 2));
    rows.emplace_back("weak", at_cosine(0.5, dim - 1));
    return testutil::single_space_corpus(rows);
}

MiningParams vsem_only(std::uint64_t seed) {
    MiningParams params;
    params.spaces = {SpaceTag::VisualSemantic};
    params.seed = seed;
    return params;
}

struct SyntheticSetup {
    Corpus corpus;
    std::vector<std::unique_ptr<SimIndex>> owned;
    std::map<SpaceTag, const SimIndex*> indices;

    explicit SyntheticSetup(double decorrelation, std::uint64_t seed = 19, int clusters = 25,
                            int per_cluster = 12)
        : corpus(generate_synthetic_corpus([&] {
              SyntheticSpec spec;
              spec.seed = seed;
              spec.n_clusters = clusters;
              spec.items_per_cluster = per_cluster;
              spec.dims = {{SpaceTag::VisualSemantic, 24},
                           {SpaceTag::VisualPattern, 16},
                           {SpaceTag::CaptionText, 12}};
              spec.intra_cluster_cos = 0.9;
              spec.cross_space_decorrelation = decorrelation;
              return spec;
          }())) {
        for (const SpaceTag tag : kAllSpaces) {
            owned.push_back(build_index(corpus, tag, IndexKind::Exact));
            indices[tag] = owned.back().get();
        }
    }
};

std::string unordered_key(const MinedPair& pair) {
    return pair.query_id < pair.target_id ? pair.query_id + "|" + pair.target_id
                                          : pair.target_id + "|" + pair.query_id;
}

}  // namespace

TEST_CASE("mining: six survivors and cap one yield one pair with five peers") {
    const Corpus corpus = banded_corpus(6);
    const auto index = build_index(corpus, SpaceTag::VisualSemantic, IndexKind::Exact);
    MiningParams params = vsem_only(7);
    params.per_query_cap = 1;

    MiningReport report;
    const auto pairs =
        mine_pairs(corpus, {{SpaceTag::VisualSemantic, index.get()}}, params, &report);

    // Only "q" has six in-band survivors; every t_i sees q (0.9) plus the
    // other t_j at 0.81, also six survivors. dup/weak see too few.
    std::vector<MinedPair> from_q;
    for (const auto& p : pairs) {
        if (p.query_id == "q") from_q.push_back(p);
    }
    REQUIRE(from_q.size() == 1);
    const MinedPair& pair = from_q.front();
    CHECK(pair.target_id.rfind("t", 0) == 0);
    CHECK(pair.retrieved_peers.size() == 5);
    CHECK(pair.score == doctest::Approx(0.9).epsilon(1e-9));
    for (const auto& peer : pair.retrieved_peers) {
        CHECK(peer != pair.query_id);
        CHECK(peer != pair.target_id);
    }
}

TEST_CASE("mining: fewer than six survivors skips the cell") {
    const Corpus corpus = banded_corpus(4);
    const auto index = build_index(corpus, SpaceTag::VisualSemantic, IndexKind::Exact);
    MiningReport report;
    const auto pairs = mine_pairs(corpus, {{SpaceTag::VisualSemantic, index.get()}},
                                  vsem_only(7), &report);
    CHECK(pairs.empty());
    CHECK(report.skipped_cells == corpus.size());
    CHECK(report.queries == corpus.size());
}

TEST_CASE("mining: the cap bounds pairs per query and targets are distinct") {
    const Corpus corpus = banded_corpus(8);
    const auto index = build_index(corpus, SpaceTag::VisualSemantic, IndexKind::Exact);
    MiningParams params = vsem_only(3);
    params.per_query_cap = 3;
    const auto pairs =
        mine_pairs(corpus, {{SpaceTag::VisualSemantic, index.get()}}, params, nullptr);
    std::map<std::string, std::set<std::string>> targets_by_query;
    for (const auto& p : pairs) targets_by_query[p.query_id].insert(p.target_id);
    for (const auto& [query, targets] : targets_by_query) {
        CAPTURE(query);
        CHECK(targets.size() <= 3);
    }
    REQUIRE(targets_by_query.count("q"));
    CHECK(targets_by_query["q"].size() == 3);
}

TEST_CASE("mining: k below six is rejected, as are bad rates and caps") {
    const Corpus corpus = banded_corpus(6);
    const auto index = build_index(corpus, SpaceTag::VisualSemantic, IndexKind::Exact);
    const std::map<SpaceTag, const SimIndex*> indices{{SpaceTag::VisualSemantic, index.get()}};
    MiningParams params = vsem_only(1);
    params.k = 5;
    CHECK(thrown_code([&] { mine_pairs(corpus, indices, params); }) == Errc::InvalidParam);
    params = vsem_only(1);
    params.per_query_cap = 0;
    CHECK(thrown_code([&] { mine_pairs(corpus, indices, params); }) == Errc::InvalidParam);
    params = vsem_only(1);
    params.query_sample_rate = 1.5;
    CHECK(thrown_code([&] { mine_pairs(corpus, indices, params); }) == Errc::InvalidParam);
    params = vsem_only(1);
    params.bands[SpaceTag::VisualSemantic] = SimilarityBand{0.96, 0.8};
    CHECK(thrown_code([&] { mine_pairs(corpus, indices, params); }) == Errc::InvalidParam);
}

TEST_CASE("mining: every emitted pair re-checks inside its band") {
    SyntheticSetup setup(0.25);
    MiningParams params;
    params.seed = 11;
    const auto pairs = mine_pairs(setup.corpus, setup.indices, params, nullptr);
    REQUIRE(pairs.size() > 100);
    for (const auto& pair : pairs) {
        const double cos = setup.corpus.vector_of(pair.query_id, pair.space)
                               .dot(setup.corpus.vector_of(pair.target_id, pair.space));
        const SimilarityBand band = params.band_for(pair.space);
        CHECK(band.contains(cos));
        CHECK(std::abs(cos - pair.score) <= 1e-9);
        CHECK(pair.query_id != pair.target_id);
        for (const auto& peer : pair.retrieved_peers) {
            CHECK(peer != pair.query_id);
            CHECK(peer != pair.target_id);
        }
    }
}

TEST_CASE("mining: deterministic per seed and invariant under worker count") {
    SyntheticSetup setup(0.25);
    MiningParams params;
    params.seed = 13;
    params.workers = 1;
    const auto once = mine_pairs(setup.corpus, setup.indices, params, nullptr);
    const auto twice = mine_pairs(setup.corpus, setup.indices, params, nullptr);
    params.workers = 4;
    const auto parallel = mine_pairs(setup.corpus, setup.indices, params, nullptr);

    const auto equal = [](const std::vector<MinedPair>& a, const std::vector<MinedPair>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].query_id != b[i].query_id || a[i].target_id != b[i].target_id ||
                a[i].space != b[i].space || a[i].score != b[i].score ||
                a[i].retrieved_peers != b[i].retrieved_peers) {
                return false;
            }
        }
        return true;
    };
    CHECK(equal(once, twice));
    CHECK(equal(once, parallel));

    params.seed = 14;
    const auto other_seed = mine_pairs(setup.corpus, setup.indices, params, nullptr);
    CHECK_FALSE(equal(once, other_seed));
}

TEST_CASE("mining: query sampling rate shrinks the query set deterministically") {
    SyntheticSetup setup(0.25);
    MiningParams params;
    params.seed = 17;
    MiningReport full_report;
    mine_pairs(setup.corpus, setup.indices, params, &full_report);
    CHECK(full_report.queries == setup.corpus.size());

    params.query_sample_rate = 0.5;
    MiningReport half_report;
    mine_pairs(setup.corpus, setup.indices, params, &half_report);
    CHECK(half_report.queries < full_report.queries);
    CHECK(half_report.queries > full_report.queries / 4);
    MiningReport again;
    mine_pairs(setup.corpus, setup.indices, params, &again);
    CHECK(again.queries == half_report.queries);
}

TEST_CASE("mining: fully decorrelated spaces surface mostly different targets") {
    SyntheticSetup setup(1.0, 29, 30, 12);
    MiningParams params;
    params.seed = 5;
    params.per_query_cap = 3;
    const auto pairs = mine_pairs(setup.corpus, setup.indices, params, nullptr);

    std::map<std::string, std::set<std::string>> vsem_targets, ctxt_targets;
    for (const auto& pair : pairs) {
        if (pair.space == SpaceTag::VisualSemantic) vsem_targets[pair.query_id].insert(pair.target_id);
        if (pair.space == SpaceTag::CaptionText) ctxt_targets[pair.query_id].insert(pair.target_id);
    }
    int both = 0, disjoint = 0;
    for (const auto& [query, vt] : vsem_targets) {
        const auto it = ctxt_targets.find(query);
        if (it == ctxt_targets.end()) continue;
        ++both;
        bool overlap = false;
        for (const auto& t : vt) overlap = overlap || it->second.count(t) > 0;
        if (!overlap) ++disjoint;
    }
    REQUIRE(both >= 20);
    CHECK(static_cast<double>(disjoint) / static_cast<double>(both) >= 0.5);
}

TEST_CASE("mining: the three-space union finds more distinct pairs than any single space") {
    SyntheticSetup setup(0.5, 37);
    MiningParams params;
    params.seed = 23;
    const auto count_distinct = [&](std::vector<SpaceTag> spaces) {
        MiningParams p = params;
        p.spaces = std::move(spaces);
        const auto pairs = mine_pairs(setup.corpus, setup.indices, p, nullptr);
        std::set<std::string> keys;
        for (const auto& pair : pairs) keys.insert(unordered_key(pair));
        return keys.size();
    };
    const std::size_t all = count_distinct({SpaceTag::VisualSemantic, SpaceTag::VisualPattern,
                                            SpaceTag::CaptionText});
    CHECK(all > count_distinct({SpaceTag::VisualSemantic}));
    CHECK(all > count_distinct({SpaceTag::VisualPattern}));
    CHECK(all > count_distinct({SpaceTag::CaptionText}));
}

TEST_CASE("dedup: mirrored pair from a later space is dropped, first wins") {
    MinedPair ab;
    ab.query_id = "a";
    ab.target_id = "b";
    ab.space = SpaceTag::VisualSemantic;
    MinedPair ba;
    ba.query_id = "b";
    ba.target_id = "a";
    ba.space = SpaceTag::CaptionText;

    MiningReport report;
    const auto kept = dedup_pairs({ab, ba}, &report);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].space == SpaceTag::VisualSemantic);
    CHECK(kept[0].query_id == "a");
    CHECK(report.deduped == 1);
}

TEST_CASE("dedup: disjoint pairs pass through unchanged") {
    MinedPair ab, cd;
    ab.query_id = "a";
    ab.target_id = "b";
    cd.query_id = "c";
    cd.target_id = "d";
    const auto kept = dedup_pairs({ab, cd}, nullptr);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].query_id == "a");
    CHECK(kept[1].query_id == "c");
}

TEST_CASE("dedup: a mined run has no repeated unordered keys afterwards") {
    SyntheticSetup setup(0.25, 43);
    MiningParams params;
    params.seed = 31;
    const auto mined = mine_pairs(setup.corpus, setup.indices, params, nullptr);
    const auto unique = dedup_pairs(mined, nullptr);
    std::set<std::string> keys;
    for (const auto& pair : unique) {
        const auto [it, inserted] = keys.insert(unordered_key(pair));
        CHECK(inserted);
    }
    CHECK(unique.size() <= mined.size());
    CHECK(keys.size() == unique.size());
}

TEST_CASE("hard negatives: five peers for five slots take everything, no randomness") {
    MinedPair pair;
    pair.query_id = "q";
    pair.target_id = "t1";
    pair.retrieved_peers = {"t2", "t3", "t4", "t5", "t6"};
    const TripletProvenance prov{"unit", SimilarityBand{0.8, 0.96}, 1, ""};

    const TripletRecord a = attach_hard_negatives(pair, 5, 1, prov);
    const TripletRecord b = attach_hard_negatives(pair, 5, 999, prov);
    CHECK(a.hard_negative_ids == b.hard_negative_ids);
    const std::set<std::string> got(a.hard_negative_ids.begin(), a.hard_negative_ids.end());
    CHECK(got == std::set<std::string>{"t2", "t3", "t4", "t5", "t6"});
    CHECK(a.instructions.empty());
    CHECK(a.provenance.corpus_id == "unit");
}

TEST_CASE("hard negatives: nine peers for five slots vary with the seed") {
    MinedPair pair;
    pair.query_id = "q";
    pair.target_id = "t";
    for (int i = 0; i < 9; ++i) pair.retrieved_peers.push_back("p" + std::to_string(i));
    const TripletProvenance prov{"unit", SimilarityBand{0.8, 0.96}, 1, ""};

    int differing = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const TripletRecord a = attach_hard_negatives(pair, 5, seed, prov);
        const TripletRecord b = attach_hard_negatives(pair, 5, seed + 100, prov);
        REQUIRE(a.hard_negative_ids.size() == 5);
        const std::set<std::string> uniq(a.hard_negative_ids.begin(), a.hard_negative_ids.end());
        CHECK(uniq.size() == 5);
        for (const auto& id : a.hard_negative_ids) {
            CHECK(id != "q");
            CHECK(id != "t");
        }
        if (a.hard_negative_ids != b.hard_negative_ids) ++differing;
    }
    CHECK(differing > 0);
}

TEST_CASE("hard negatives: too few peers is an error") {
    MinedPair pair;
    pair.query_id = "q";
    pair.target_id = "t";
    pair.retrieved_peers = {"p0", "p1", "p2"};
    const TripletProvenance prov{"unit", SimilarityBand{0.8, 0.96}, 1, ""};
    CHECK(thrown_code([&] { attach_hard_negatives(pair, 5, 1, prov); }) == Errc::NotEnoughPeers);
}

TEST_CASE("triplet json: full round trip") {
    TripletRecord record;
    record.query_id = "q";
    record.target_id = "t";
    record.space = SpaceTag::VisualPattern;
    record.score = 0.875;
    record.instructions = {"make it blue", "turn it into night"};
    record.hard_negative_ids = {"h1", "h2", "h3", "h4", "h5"};
    record.provenance = {"corpus-x", SimilarityBand{0.8, 0.96}, 77, "mock-annotator-v1"};

    const TripletRecord back = triplet_from_json(triplet_to_json(record), 1);
    CHECK(back.query_id == "q");
    CHECK(back.target_id == "t");
    CHECK(back.space == SpaceTag::VisualPattern);
    CHECK(back.score == 0.875);
    CHECK(back.instructions == record.instructions);
    CHECK(back.hard_negative_ids == record.hard_negative_ids);
    CHECK(back.provenance.corpus_id == "corpus-x");
    CHECK(back.provenance.band.lo == 0.8);
    CHECK(back.provenance.band.hi == 0.96);
    CHECK(back.provenance.seed == 77);
    CHECK(back.provenance.annotator_id == "mock-annotator-v1");

    CHECK(thrown_code([] { triplet_from_json(nlohmann::json{{"query_id", "q"}}, 3); }) ==
          Errc::MalformedRecord);
}

TEST_CASE("shards: records split by size and read back in order") {
    TempDir tmp;
    std::vector<TripletRecord> records;
    for (int i = 0; i < 25; ++i) {
        TripletRecord r;
        r.query_id = "q" + std::to_string(i);
        r.target_id = "t" + std::to_string(i);
        r.score = 0.9;
        r.hard_negative_ids = {"a", "b", "c", "d", "e"};
        records.push_back(std::move(r));
    }
    const auto paths = write_triplet_shards(records, tmp.path, 10);
    REQUIRE(paths.size() == 3);
    CHECK(paths[0].filename() == "shard-000000.jsonl");
    CHECK(paths[2].filename() == "shard-000002.jsonl");

    const auto back = read_triplet_shards(paths);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].query_id == records[i].query_id);

    const auto from_dir = read_triplet_dir(tmp.path);
    REQUIRE(from_dir.size() == records.size());
    CHECK(from_dir[24].target_id == "t24");
}

TEST_CASE("report json: counters serialize by space name") {
    MiningReport report;
    report.queries = 100;
    report.skipped_cells = 7;
    report.pairs_per_space[SpaceTag::VisualSemantic] = 50;
    report.pairs_per_space[SpaceTag::CaptionText] = 30;
    report.deduped = 12;
    const nlohmann::json j = report_to_json(report);
    CHECK(j.at("queries") == 100);
    CHECK(j.at("skipped_cells") == 7);
    CHECK(j.at("pairs_per_space").at("vsem") == 50);
    CHECK(j.at("pairs_per_space").at("ctxt") == 30);
    CHECK(j.at("deduped") == 12);
}
