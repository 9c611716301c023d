#include "pairforge/miner.hpp"

#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <thread>
#include <unordered_set>

namespace pairforge {

namespace {

constexpr int kMinSurvivors = 6;  // target + five hard negatives

std::string cell_key(SpaceTag space, const std::string& query_id) {
    return std::string(to_string(space)) + "|" + query_id;
}

std::string pair_key(const MinedPair& pair) {
    return std::string(to_string(pair.space)) + "|" + pair.query_id + "|" + pair.target_id;
}

}  // namespace

nlohmann::json report_to_json(const MiningReport& report) {
    nlohmann::json per_space = nlohmann::json::object();
    for (const auto& [tag, count] : report.pairs_per_space) {
        per_space[std::string(to_string(tag))] = count;
    }
    return {{"queries", report.queries},
            {"skipped_cells", report.skipped_cells},
            {"pairs_per_space", per_space},
            {"deduped", report.deduped}};
}

std::vector<MinedPair> mine_pairs(const Corpus& corpus,
                                  const std::map<SpaceTag, const SimIndex*>& indices,
                                  const MiningParams& params, MiningReport* report) {
    if (params.k < kMinSurvivors) {
        fail(Errc::InvalidParam, "k must be >= 6 so a target and five negatives can survive");
    }
    if (params.per_query_cap < 1) fail(Errc::InvalidParam, "per_query_cap must be positive");
    if (params.query_sample_rate < 0.0 || params.query_sample_rate > 1.0) {
        fail(Errc::InvalidParam, "query_sample_rate must lie in [0, 1]");
    }
    if (params.spaces.empty()) fail(Errc::InvalidParam, "no mining spaces requested");
    for (SpaceTag tag : params.spaces) {
        if (!params.band_for(tag).valid()) {
            fail(Errc::InvalidParam, "band lo must be < hi for space " +
                                         std::string(to_string(tag)));
        }
        auto it = indices.find(tag);
        if (it == indices.end() || it->second == nullptr) {
            fail(Errc::UnknownSpace, "no index for space " + std::string(to_string(tag)));
        }
    }

    // Queries in ascending item_id order: the canonical stream order that
    // dedup relies on, and stable under any worker scheduling.
    std::vector<std::string> queries;
    queries.reserve(corpus.size());
    for (const auto& item : corpus.items()) queries.push_back(item.item_id);
    std::sort(queries.begin(), queries.end());
    if (params.query_sample_rate < 1.0) {
        std::vector<std::string> sampled;
        sampled.reserve(queries.size());
        for (const auto& id : queries) {
            Rng rng(derive_seed(params.seed, "qsample", id));
            if (rng.next_unit() < params.query_sample_rate) sampled.push_back(id);
        }
        queries.swap(sampled);
    }

    struct Cell {
        std::vector<MinedPair> pairs;
        bool skipped = false;
    };

    std::vector<MinedPair> out;
    std::uint64_t skipped = 0;
    std::map<SpaceTag, std::uint64_t> per_space;
    for (SpaceTag tag : params.spaces) per_space[tag] = 0;

    for (SpaceTag tag : params.spaces) {
        const SimIndex* index = indices.at(tag);
        const SimilarityBand band = params.band_for(tag);
        std::vector<Cell> cells(queries.size());

        const auto mine_cell = [&](std::size_t qi) {
            const std::string& query_id = queries[qi];
            const std::vector<Neighbor> survivors =
                band_filter(index->knn(query_id, params.k), band);
            if (static_cast<int>(survivors.size()) < kMinSurvivors) {
                cells[qi].skipped = true;
                return;
            }
            Rng rng(derive_seed(params.seed, "target", cell_key(tag, query_id)));
            const std::size_t take =
                std::min<std::size_t>(static_cast<std::size_t>(params.per_query_cap),
                                      survivors.size());
            const std::vector<std::size_t> picks =
                rng.sample_without_replacement(survivors.size(), take);
            for (std::size_t pick : picks) {
                MinedPair pair;
                pair.query_id = query_id;
                pair.target_id = survivors[pick].item_id;
                pair.space = tag;
                pair.score = survivors[pick].score;
                pair.retrieved_peers.reserve(survivors.size() - 1);
                for (std::size_t s = 0; s < survivors.size(); ++s) {
                    if (s != pick) pair.retrieved_peers.push_back(survivors[s].item_id);
                }
                cells[qi].pairs.push_back(std::move(pair));
            }
        };

        const int workers = std::max(1, params.workers);
        if (workers == 1 || queries.size() < 2) {
            for (std::size_t qi = 0; qi < queries.size(); ++qi) mine_cell(qi);
        } else {
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            pool.reserve(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back([&] {
                    for (std::size_t qi = next.fetch_add(1); qi < queries.size();
                         qi = next.fetch_add(1)) {
                        mine_cell(qi);
                    }
                });
            }
            for (auto& t : pool) t.join();
        }

        for (auto& cell : cells) {
            if (cell.skipped) {
                ++skipped;
                continue;
            }
            per_space[tag] += cell.pairs.size();
            for (auto& pair : cell.pairs) out.push_back(std::move(pair));
        }
    }

    if (report) {
        report->queries = queries.size();
        report->skipped_cells = skipped;
        report->pairs_per_space = std::move(per_space);
    }
    return out;
}

std::vector<MinedPair> dedup_pairs(std::vector<MinedPair> pairs, MiningReport* report) {
    std::unordered_set<std::string> seen;
    seen.reserve(pairs.size());
    std::vector<MinedPair> out;
    out.reserve(pairs.size());
    std::uint64_t removed = 0;
    for (auto& pair : pairs) {
        const bool flip = pair.target_id < pair.query_id;
        const std::string key = flip ? pair.target_id + "\x1f" + pair.query_id
                                     : pair.query_id + "\x1f" + pair.target_id;
        if (seen.insert(key).second) {
            out.push_back(std::move(pair));
        } else {
            ++removed;
        }
    }
    if (report) report->deduped += removed;
    return out;
}

TripletRecord attach_hard_negatives(const MinedPair& pair, int n, std::uint64_t seed,
                                    const TripletProvenance& provenance) {
    if (n < 1) fail(Errc::InvalidParam, "negative count must be positive");
    if (static_cast<int>(pair.retrieved_peers.size()) < n) {
        fail(Errc::NotEnoughPeers, "have " + std::to_string(pair.retrieved_peers.size()) +
                                       ", need " + std::to_string(n));
    }
    Rng rng(derive_seed(seed, "hardneg", pair_key(pair)));
    const std::vector<std::size_t> picks =
        rng.sample_without_replacement(pair.retrieved_peers.size(), static_cast<std::size_t>(n));

    TripletRecord record;
    record.query_id = pair.query_id;
    record.target_id = pair.target_id;
    record.space = pair.space;
    record.score = pair.score;
    record.hard_negative_ids.reserve(static_cast<std::size_t>(n));
    for (std::size_t pick : picks) record.hard_negative_ids.push_back(pair.retrieved_peers[pick]);
    record.provenance = provenance;
    return record;
}

nlohmann::json triplet_to_json(const TripletRecord& record) {
    return {{"query_id", record.query_id},
            {"target_id", record.target_id},
            {"space", std::string(to_string(record.space))},
            {"score", record.score},
            {"instructions", record.instructions},
            {"hard_negative_ids", record.hard_negative_ids},
            {"provenance",
             {{"corpus_id", record.provenance.corpus_id},
              {"band", {{"lo", record.provenance.band.lo}, {"hi", record.provenance.band.hi}}},
              {"seed", record.provenance.seed},
              {"annotator_id", record.provenance.annotator_id}}}};
}

TripletRecord triplet_from_json(const nlohmann::json& j, std::size_t line_no) {
    TripletRecord record;
    try {
        record.query_id = j.at("query_id").get<std::string>();
        record.target_id = j.at("target_id").get<std::string>();
        const std::string space_s = j.at("space").get<std::string>();
        const auto space = space_from_string(space_s);
        if (!space) fail(Errc::UnknownSpace, space_s);
        record.space = *space;
        record.score = j.at("score").get<double>();
        record.instructions = j.at("instructions").get<std::vector<std::string>>();
        record.hard_negative_ids = j.at("hard_negative_ids").get<std::vector<std::string>>();
        const auto& prov = j.at("provenance");
        record.provenance.corpus_id = prov.at("corpus_id").get<std::string>();
        record.provenance.band.lo = prov.at("band").at("lo").get<double>();
        record.provenance.band.hi = prov.at("band").at("hi").get<double>();
        record.provenance.seed = prov.at("seed").get<std::uint64_t>();
        record.provenance.annotator_id = prov.at("annotator_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
    return record;
}

std::vector<std::filesystem::path> write_triplet_shards(const std::vector<TripletRecord>& records,
                                                        const std::filesystem::path& dir,
                                                        std::size_t shard_size,
                                                        const std::string& prefix) {
    if (shard_size == 0) fail(Errc::InvalidParam, "shard_size must be positive");
    std::vector<std::filesystem::path> paths;
    std::size_t shard = 0;
    for (std::size_t start = 0; start < records.size(); start += shard_size, ++shard) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s-%06zu.jsonl", prefix.c_str(), shard);
        const std::filesystem::path path = dir / name;
        std::string body;
        const std::size_t end = std::min(records.size(), start + shard_size);
        for (std::size_t i = start; i < end; ++i) {
            body += triplet_to_json(records[i]).dump();
            body += '\n';
        }
        write_file(path, body);
        paths.push_back(path);
    }
    if (records.empty()) {
        const std::filesystem::path path = dir / (prefix + "-000000.jsonl");
        write_file(path, "");
        paths.push_back(path);
    }
    return paths;
}

std::vector<TripletRecord> read_triplet_shards(const std::vector<std::filesystem::path>& paths) {
    std::vector<TripletRecord> records;
    for (const auto& path : paths) {
        for_each_line(path, [&](std::size_t line_no, const std::string& line) {
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                fail(Errc::MalformedRecord,
                     path.string() + ":" + std::to_string(line_no) + ": invalid JSON");
            }
            records.push_back(triplet_from_json(j, line_no));
        });
    }
    return records;
}

std::vector<TripletRecord> read_triplet_dir(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> paths;
    if (std::filesystem::exists(dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.path().extension() == ".jsonl") paths.push_back(entry.path());
        }
    }
    std::sort(paths.begin(), paths.end());
    return read_triplet_shards(paths);
}

}  // namespace pairforge
