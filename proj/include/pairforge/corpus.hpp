#pragma once

#include "pairforge/types.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace pairforge {

struct CorpusManifest {
    std::string corpus_id;
    std::vector<std::pair<SpaceTag, int>> spaces;  // (tag, dim), no duplicate tags
    std::uint64_t item_count = 0;
    std::string created_at;  // ISO-8601
    std::optional<std::uint64_t> seed;
};

struct CorpusItem {
    std::string item_id;
    std::string caption;
    std::optional<std::string> payload_uri;  // opaque locator, never dereferenced
    std::map<SpaceTag, Eigen::VectorXd> embeddings;  // unit L2 norm after ingestion
};

/// Immutable after construction; safe for concurrent reads.
class Corpus {
  public:
    Corpus(CorpusManifest manifest, std::vector<CorpusItem> items);

    const CorpusManifest& manifest() const { return manifest_; }
    const std::vector<CorpusItem>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    const CorpusItem& item(std::size_t index) const { return items_[index]; }
    const CorpusItem* find(const std::string& item_id) const;
    /// Throws UnknownItem.
    std::size_t index_of(const std::string& item_id) const;

    bool has_space(SpaceTag tag) const;
    /// Throws UnknownSpace.
    int space_dim(SpaceTag tag) const;
    const Eigen::VectorXd& vector_of(const std::string& item_id, SpaceTag tag) const;
    const Eigen::VectorXd& vector_at(std::size_t index, SpaceTag tag) const;

    /// Item vectors stacked as rows (size() x dim), in item order.
    Eigen::MatrixXd stacked(SpaceTag tag) const;

  private:
    CorpusManifest manifest_;
    std::vector<CorpusItem> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

CorpusManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const CorpusManifest& manifest);

/// Parses one record line. Throws MalformedRecord with the line number on
/// schema violations; Duplicate/Dimension/ZeroNorm checks happen in the
/// corpus assembly below.
CorpusItem record_from_json(const nlohmann::json& j, std::size_t line_no);
nlohmann::json record_to_json(const CorpusItem& item);

/// Builds a corpus from already-parsed records, normalizing every vector to
/// unit L2 norm (vectors already within 1e-9 of unit norm are left bitwise
/// untouched so that ingestion is idempotent).
Corpus assemble_corpus(CorpusManifest manifest, std::vector<CorpusItem> records);

Corpus ingest_corpus(const std::filesystem::path& manifest_path,
                     const std::filesystem::path& records_path);

void emit_corpus(const Corpus& corpus, const std::filesystem::path& manifest_path,
                 const std::filesystem::path& records_path);

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int n_clusters = 0;
    int items_per_cluster = 0;
    std::map<SpaceTag, int> dims;  // must cover all three spaces
    double intra_cluster_cos = 0.9;        // in (0, 1)
    double cross_space_decorrelation = 0;  // in [0, 1]
};

/// Deterministic clustered corpus. Cluster membership in the visual-pattern
/// and caption spaces is re-drawn per item with probability
/// cross_space_decorrelation, so the three spaces surface different
/// neighbor sets. Captions are templated strings carrying the cluster id and
/// a per-item detail token.
Corpus generate_synthetic_corpus(const SyntheticSpec& spec);

/// Primary (visual-semantic) cluster id encoded in a synthetic caption,
/// or -1 when the caption does not carry one.
int synthetic_cluster_of(const std::string& caption);

}  // namespace pairforge
