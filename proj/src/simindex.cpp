#include "pairforge/simindex.hpp"

#include "pairforge/hnsw.hpp"
#include "pairforge/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>

namespace pairforge {

std::string_view to_string(IndexKind kind) {
    return kind == IndexKind::Exact ? "exact" : "hnsw";
}

SimIndex::SimIndex(const Corpus& corpus, SpaceTag space)
    : space_(space), corpus_id_(corpus.manifest().corpus_id) {
    if (corpus.size() == 0) fail(Errc::EmptyCorpus, corpus_id_);
    if (!corpus.has_space(space)) fail(Errc::UnknownSpace, std::string(to_string(space)));
    ids_.reserve(corpus.size());
    row_of_.reserve(corpus.size());
    for (const auto& item : corpus.items()) {
        row_of_.emplace(item.item_id, ids_.size());
        ids_.push_back(item.item_id);
    }
    vectors_ = corpus.stacked(space);
}

std::vector<Neighbor> SimIndex::knn(const std::string& query_id, int k) const {
    auto it = row_of_.find(query_id);
    if (it == row_of_.end()) fail(Errc::UnknownItem, query_id);
    const auto row = static_cast<std::ptrdiff_t>(it->second);
    return search_vector(vectors_.row(row).transpose(), k, row);
}

namespace {

class ExactIndex : public SimIndex {
  public:
    ExactIndex(const Corpus& corpus, SpaceTag space) : SimIndex(corpus, space) {}

    IndexKind kind() const override { return IndexKind::Exact; }

    std::vector<Neighbor> search_vector(const Eigen::VectorXd& query, int k,
                                        std::ptrdiff_t exclude) const override {
        if (k <= 0) fail(Errc::InvalidParam, "k must be positive");
        const Eigen::VectorXd scores = vectors_ * query;
        std::vector<int> order;
        order.reserve(ids_.size());
        for (int i = 0; i < static_cast<int>(ids_.size()); ++i) {
            if (i != exclude) order.push_back(i);
        }
        const auto better = [&](int a, int b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return ids_[static_cast<std::size_t>(a)] < ids_[static_cast<std::size_t>(b)];
        };
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                          order.end(), better);
        std::vector<Neighbor> out;
        out.reserve(take);
        for (std::size_t i = 0; i < take; ++i) {
            out.push_back({ids_[static_cast<std::size_t>(order[i])], scores[order[i]]});
        }
        return out;
    }

    nlohmann::json snapshot() const override {
        return {{"format", "simindex-v1"},
                {"kind", "exact"},
                {"corpus_id", corpus_id_},
                {"space", std::string(to_string(space_))}};
    }
};

}  // namespace

std::unique_ptr<SimIndex> build_index(const Corpus& corpus, SpaceTag space, IndexKind kind,
                                      const ApproxGraphParams& params) {
    if (kind == IndexKind::Exact) return std::make_unique<ExactIndex>(corpus, space);
    return std::make_unique<HnswIndex>(corpus, space, params);
}

void save_index(const SimIndex& index, const std::filesystem::path& path) {
    write_file(path, index.snapshot().dump() + "\n");
}

std::unique_ptr<SimIndex> load_index(const Corpus& corpus, const std::filesystem::path& path) {
    const nlohmann::json j = read_json(path);
    try {
        if (j.at("format").get<std::string>() != "simindex-v1") {
            fail(Errc::MalformedRecord, "unknown index format tag");
        }
        if (j.at("corpus_id").get<std::string>() != corpus.manifest().corpus_id) {
            fail(Errc::InvalidParam, "index was built from corpus '" +
                                         j.at("corpus_id").get<std::string>() + "', not '" +
                                         corpus.manifest().corpus_id + "'");
        }
        const auto space = space_from_string(j.at("space").get<std::string>());
        if (!space) fail(Errc::UnknownSpace, j.at("space").get<std::string>());
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "exact") return std::make_unique<ExactIndex>(corpus, *space);
        if (kind != "hnsw") fail(Errc::MalformedRecord, "unknown index kind " + kind);

        ApproxGraphParams params;
        const auto& p = j.at("params");
        params.max_degree = p.at("max_degree").get<int>();
        params.ef_construction = p.at("ef_construction").get<int>();
        params.ef_search = p.at("ef_search").get<int>();
        params.seed = p.at("seed").get<std::uint64_t>();
        const auto levels = j.at("levels").get<std::vector<int>>();
        const auto links = j.at("adjacency").get<std::vector<std::vector<std::vector<int>>>>();
        const int entry = j.at("entry").get<int>();
        const int max_level = j.at("max_level").get<int>();
        if (levels.size() != corpus.size() || links.size() != corpus.size()) {
            fail(Errc::InvalidParam, "snapshot node count does not match corpus");
        }
        return std::make_unique<HnswIndex>(corpus, *space, params, levels, links, entry,
                                           max_level);
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("index snapshot: ") + e.what());
    }
}

std::vector<Neighbor> band_filter(const std::vector<Neighbor>& neighbors,
                                  const SimilarityBand& band) {
    if (!band.valid()) fail(Errc::InvalidParam, "band lo must be < hi within [-1, 1]");
    std::vector<Neighbor> out;
    out.reserve(neighbors.size());
    for (const auto& n : neighbors) {
        if (band.contains(n.score)) out.push_back(n);
    }
    return out;
}

}  // namespace pairforge
