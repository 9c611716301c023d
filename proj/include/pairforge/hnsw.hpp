#pragma once

#include "pairforge/simindex.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace pairforge {

/// Deterministic hierarchical small-world graph over cosine similarity.
/// Level draws, neighbor selection and link pruning depend only on
/// (vectors, insertion order, params.seed), so two builds with the same
/// inputs produce identical adjacency.
class HnswIndex : public SimIndex {
  public:
    HnswIndex(const Corpus& corpus, SpaceTag space, const ApproxGraphParams& params);

    /// Restores from snapshot() output without re-running construction.
    HnswIndex(const Corpus& corpus, SpaceTag space, const ApproxGraphParams& params,
              const std::vector<int>& levels,
              const std::vector<std::vector<std::vector<int>>>& links, int entry, int max_level);

    IndexKind kind() const override { return IndexKind::ApproxGraph; }

    std::vector<Neighbor> search_vector(const Eigen::VectorXd& query, int k,
                                        std::ptrdiff_t exclude) const override;

    nlohmann::json snapshot() const override;

    const ApproxGraphParams& params() const { return params_; }
    const std::vector<std::vector<std::vector<int>>>& links() const { return links_; }
    int entry_point() const { return entry_; }
    int max_level() const { return max_level_; }

  private:
    struct Hit {
        double score;
        int node;
    };
    // Total order on hits: higher score first, then lower node index.
    static bool hit_before(const Hit& a, const Hit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.node < b.node;
    }

    double score_to(const Eigen::VectorXd& q, int node) const {
        return vectors_.row(node).dot(q);
    }

    int degree_cap(int level) const { return level == 0 ? 2 * params_.max_degree : params_.max_degree; }

    void insert(int node, int level);
    int greedy_descend(const Eigen::VectorXd& q, int entry, int level) const;
    /// Best-first beam search at one level; result sorted best-first.
    std::vector<Hit> search_layer(const Eigen::VectorXd& q, int entry, int ef, int level) const;
    /// Keeps candidates not dominated by an already-selected neighbor, then
    /// fills from the skipped ones; candidates must be sorted best-first.
    std::vector<Hit> select_neighbors(const Eigen::VectorXd& q, const std::vector<Hit>& candidates,
                                      int cap) const;
    void shrink_links(int node, int level);

    ApproxGraphParams params_;
    std::vector<int> levels_;
    std::vector<std::vector<std::vector<int>>> links_;  // node -> level -> neighbors
    int entry_ = -1;
    int max_level_ = -1;
    mutable std::vector<std::uint32_t> visit_mark_;
    mutable std::uint32_t visit_epoch_ = 0;
};

}  // namespace pairforge
