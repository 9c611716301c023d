#pragma once

#include "pairforge/corpus.hpp"
#include "pairforge/types.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace pairforge {

enum class IndexKind { Exact, ApproxGraph };

std::string_view to_string(IndexKind kind);

struct ApproxGraphParams {
    int max_degree = 16;
    int ef_construction = 200;
    int ef_search = 64;
    std::uint64_t seed = 0;
};

/// Neighbor-list ordering used everywhere: descending score, then
/// ascending item_id.
inline bool neighbor_before(const Neighbor& a, const Neighbor& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item_id < b.item_id;
}

/// Read-only KNN index over one embedding space of a corpus. Holds its own
/// copy of the vectors, so it stays valid independent of the source corpus
/// object and is safe for concurrent queries.
class SimIndex {
  public:
    virtual ~SimIndex() = default;

    SpaceTag space() const { return space_; }
    virtual IndexKind kind() const = 0;
    const std::string& corpus_id() const { return corpus_id_; }
    const std::vector<std::string>& ids() const { return ids_; }
    std::size_t size() const { return ids_.size(); }

    /// Up to k nearest neighbors of an indexed item, self-match suppressed
    /// by identity (a duplicate vector under another id is still returned).
    /// Throws UnknownItem.
    std::vector<Neighbor> knn(const std::string& query_id, int k) const;

    /// Up to k nearest neighbors of an arbitrary query vector; exclude is an
    /// internal row to drop (-1 for none).
    virtual std::vector<Neighbor> search_vector(const Eigen::VectorXd& query, int k,
                                                std::ptrdiff_t exclude) const = 0;

    /// Versioned snapshot for save_index.
    virtual nlohmann::json snapshot() const = 0;

  protected:
    SimIndex(const Corpus& corpus, SpaceTag space);

    SpaceTag space_;
    std::string corpus_id_;
    std::vector<std::string> ids_;       // corpus item order
    Eigen::MatrixXd vectors_;            // ids_.size() x dim, row per item
    std::unordered_map<std::string, std::size_t> row_of_;
};

/// Throws UnknownSpace / EmptyCorpus. params is ignored for Exact.
std::unique_ptr<SimIndex> build_index(const Corpus& corpus, SpaceTag space, IndexKind kind,
                                      const ApproxGraphParams& params = {});

void save_index(const SimIndex& index, const std::filesystem::path& path);

/// Restores an index snapshot against the corpus it was built from; throws
/// InvalidParam when corpus_id or space layout disagrees, MalformedRecord on
/// an unreadable snapshot.
std::unique_ptr<SimIndex> load_index(const Corpus& corpus, const std::filesystem::path& path);

/// Keeps exactly the neighbors with band.lo < score < band.hi, preserving
/// order (both endpoints excluded).
std::vector<Neighbor> band_filter(const std::vector<Neighbor>& neighbors,
                                  const SimilarityBand& band);

}  // namespace pairforge
