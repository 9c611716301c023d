#pragma once

#include "pairforge/corpus.hpp"
#include "pairforge/simindex.hpp"
#include "pairforge/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pairforge {

struct MinedPair {
    std::string query_id;
    std::string target_id;
    SpaceTag space = SpaceTag::VisualSemantic;
    double score = 0.0;
    std::vector<std::string> retrieved_peers;  // band survivors minus query and target
};

struct TripletProvenance {
    std::string corpus_id;
    SimilarityBand band;
    std::uint64_t seed = 0;
    std::string annotator_id;  // empty while pending
};

struct TripletRecord {
    std::string query_id;
    std::string target_id;
    SpaceTag space = SpaceTag::VisualSemantic;
    double score = 0.0;
    std::vector<std::string> instructions;       // empty while pending annotation
    std::vector<std::string> hard_negative_ids;  // exactly 5 once attached
    TripletProvenance provenance;
};

struct MiningParams {
    std::map<SpaceTag, SimilarityBand> bands;  // missing spaces default to (0.8, 0.96)
    std::vector<SpaceTag> spaces = {SpaceTag::VisualSemantic, SpaceTag::VisualPattern,
                                    SpaceTag::CaptionText};
    int k = 10;
    int per_query_cap = 3;
    double query_sample_rate = 1.0;  // fraction of corpus items used as queries
    std::uint64_t seed = 0;
    int workers = 1;

    SimilarityBand band_for(SpaceTag tag) const {
        auto it = bands.find(tag);
        return it == bands.end() ? SimilarityBand{0.8, 0.96} : it->second;
    }
};

struct MiningReport {
    std::uint64_t queries = 0;        // query items considered (after sampling)
    std::uint64_t skipped_cells = 0;  // (query, space) cells with < 6 band survivors
    std::map<SpaceTag, std::uint64_t> pairs_per_space;
    std::uint64_t deduped = 0;  // pairs removed as unordered-key duplicates
};

nlohmann::json report_to_json(const MiningReport& report);

/// Runs knn -> band_filter -> seeded target selection for every sampled
/// query in every requested space. Output order is (space in vsem, vpat,
/// ctxt order, then query_id ascending), independent of worker count.
/// Requires k >= 6 so the target plus five hard negatives can survive.
std::vector<MinedPair> mine_pairs(const Corpus& corpus,
                                  const std::map<SpaceTag, const SimIndex*>& indices,
                                  const MiningParams& params, MiningReport* report = nullptr);

/// Keeps the first occurrence of each unordered {query_id, target_id} key;
/// input order is preserved. Adds the number removed to report->deduped.
std::vector<MinedPair> dedup_pairs(std::vector<MinedPair> pairs, MiningReport* report = nullptr);

/// Seeded selection of n hard negatives from the pair's retrieved peers.
/// Throws NotEnoughPeers.
TripletRecord attach_hard_negatives(const MinedPair& pair, int n, std::uint64_t seed,
                                    const TripletProvenance& provenance);

nlohmann::json triplet_to_json(const TripletRecord& record);
TripletRecord triplet_from_json(const nlohmann::json& j, std::size_t line_no);

/// Writes records as dir/<prefix>-NNNNNN.jsonl shards; returns shard paths.
std::vector<std::filesystem::path> write_triplet_shards(const std::vector<TripletRecord>& records,
                                                        const std::filesystem::path& dir,
                                                        std::size_t shard_size,
                                                        const std::string& prefix = "shard");

std::vector<TripletRecord> read_triplet_shards(const std::vector<std::filesystem::path>& paths);
std::vector<TripletRecord> read_triplet_dir(const std::filesystem::path& dir);

}  // namespace pairforge
