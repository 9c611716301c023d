#include "pairforge/hnsw.hpp"

#include "pairforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <queue>

namespace pairforge {

namespace {

// Max-heaps ordered so that top() is the best / the worst hit respectively.
struct WorseThan {
    bool operator()(const std::pair<double, int>& a, const std::pair<double, int>& b) const {
        if (a.first != b.first) return a.first < b.first;
        return a.second > b.second;
    }
};
struct BetterThan {
    bool operator()(const std::pair<double, int>& a, const std::pair<double, int>& b) const {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    }
};

}  // namespace

HnswIndex::HnswIndex(const Corpus& corpus, SpaceTag space, const ApproxGraphParams& params)
    : SimIndex(corpus, space), params_(params) {
    if (params_.max_degree < 2) fail(Errc::InvalidParam, "max_degree must be >= 2");
    if (params_.ef_construction < 1 || params_.ef_search < 1) {
        fail(Errc::InvalidParam, "ef parameters must be positive");
    }
    const int n = static_cast<int>(ids_.size());
    levels_.resize(static_cast<std::size_t>(n));
    links_.resize(static_cast<std::size_t>(n));
    visit_mark_.assign(static_cast<std::size_t>(n), 0);

    Rng level_rng(derive_seed(params_.seed, "hnsw-levels"));
    const double mult = 1.0 / std::log(static_cast<double>(params_.max_degree));
    for (int i = 0; i < n; ++i) {
        const double u = 1.0 - level_rng.next_unit();  // (0, 1]
        int level = static_cast<int>(std::floor(-std::log(u) * mult));
        level = std::min(level, 31);
        levels_[static_cast<std::size_t>(i)] = level;
        links_[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(level) + 1);
    }
    for (int i = 0; i < n; ++i) insert(i, levels_[static_cast<std::size_t>(i)]);
}

HnswIndex::HnswIndex(const Corpus& corpus, SpaceTag space, const ApproxGraphParams& params,
                     const std::vector<int>& levels,
                     const std::vector<std::vector<std::vector<int>>>& links, int entry,
                     int max_level)
    : SimIndex(corpus, space),
      params_(params),
      levels_(levels),
      links_(links),
      entry_(entry),
      max_level_(max_level) {
    visit_mark_.assign(ids_.size(), 0);
}

void HnswIndex::insert(int node, int level) {
    if (entry_ < 0) {
        entry_ = node;
        max_level_ = level;
        return;
    }
    const Eigen::VectorXd q = vectors_.row(node).transpose();
    int ep = entry_;
    for (int lc = max_level_; lc > level; --lc) ep = greedy_descend(q, ep, lc);

    for (int lc = std::min(level, max_level_); lc >= 0; --lc) {
        std::vector<Hit> found = search_layer(q, ep, params_.ef_construction, lc);
        std::vector<Hit> chosen = select_neighbors(q, found, params_.max_degree);
        auto& own = links_[static_cast<std::size_t>(node)][static_cast<std::size_t>(lc)];
        for (const Hit& h : chosen) {
            own.push_back(h.node);
            auto& back = links_[static_cast<std::size_t>(h.node)][static_cast<std::size_t>(lc)];
            back.push_back(node);
            if (static_cast<int>(back.size()) > degree_cap(lc)) shrink_links(h.node, lc);
        }
        ep = found.front().node;
    }
    if (level > max_level_) {
        entry_ = node;
        max_level_ = level;
    }
}

int HnswIndex::greedy_descend(const Eigen::VectorXd& q, int entry, int level) const {
    int current = entry;
    double best = score_to(q, current);
    bool improved = true;
    while (improved) {
        improved = false;
        for (int next : links_[static_cast<std::size_t>(current)][static_cast<std::size_t>(level)]) {
            const double s = score_to(q, next);
            if (s > best || (s == best && next < current)) {
                best = s;
                current = next;
                improved = true;
            }
        }
    }
    return current;
}

std::vector<HnswIndex::Hit> HnswIndex::search_layer(const Eigen::VectorXd& q, int entry, int ef,
                                                    int level) const {
    if (++visit_epoch_ == 0) {
        std::fill(visit_mark_.begin(), visit_mark_.end(), 0);
        visit_epoch_ = 1;
    }
    const std::uint32_t epoch = visit_epoch_;

    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>, WorseThan>
        candidates;  // top = best
    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>, BetterThan>
        results;  // top = worst
    const double s0 = score_to(q, entry);
    candidates.emplace(s0, entry);
    results.emplace(s0, entry);
    visit_mark_[static_cast<std::size_t>(entry)] = epoch;

    while (!candidates.empty()) {
        const auto [cs, cn] = candidates.top();
        candidates.pop();
        if (static_cast<int>(results.size()) >= ef) {
            const auto [ws, wn] = results.top();
            const bool c_worse = cs < ws || (cs == ws && cn > wn);
            if (c_worse) break;
        }
        for (int next : links_[static_cast<std::size_t>(cn)][static_cast<std::size_t>(level)]) {
            if (visit_mark_[static_cast<std::size_t>(next)] == epoch) continue;
            visit_mark_[static_cast<std::size_t>(next)] = epoch;
            const double s = score_to(q, next);
            if (static_cast<int>(results.size()) < ef) {
                candidates.emplace(s, next);
                results.emplace(s, next);
            } else {
                const auto [ws, wn] = results.top();
                const bool better = s > ws || (s == ws && next < wn);
                if (better) {
                    candidates.emplace(s, next);
                    results.emplace(s, next);
                    results.pop();
                }
            }
        }
    }

    std::vector<Hit> out;
    out.reserve(results.size());
    while (!results.empty()) {
        out.push_back({results.top().first, results.top().second});
        results.pop();
    }
    std::reverse(out.begin(), out.end());  // best first
    return out;
}

std::vector<HnswIndex::Hit> HnswIndex::select_neighbors(const Eigen::VectorXd& q,
                                                        const std::vector<Hit>& candidates,
                                                        int cap) const {
    std::vector<Hit> selected;
    std::vector<Hit> skipped;
    for (const Hit& c : candidates) {
        if (static_cast<int>(selected.size()) >= cap) break;
        bool dominated = false;
        for (const Hit& s : selected) {
            // c sits closer to an already-chosen neighbor than to q: adding
            // it would duplicate that direction, so prefer spread.
            if (vectors_.row(c.node).dot(vectors_.row(s.node)) > c.score) {
                dominated = true;
                break;
            }
        }
        if (dominated) {
            skipped.push_back(c);
        } else {
            selected.push_back(c);
        }
    }
    for (const Hit& c : skipped) {
        if (static_cast<int>(selected.size()) >= cap) break;
        selected.push_back(c);
    }
    (void)q;
    return selected;
}

void HnswIndex::shrink_links(int node, int level) {
    auto& current = links_[static_cast<std::size_t>(node)][static_cast<std::size_t>(level)];
    const Eigen::VectorXd v = vectors_.row(node).transpose();
    std::vector<Hit> hits;
    hits.reserve(current.size());
    for (int n : current) hits.push_back({score_to(v, n), n});
    std::sort(hits.begin(), hits.end(), hit_before);
    std::vector<Hit> kept = select_neighbors(v, hits, degree_cap(level));
    current.clear();
    for (const Hit& h : kept) current.push_back(h.node);
}

std::vector<Neighbor> HnswIndex::search_vector(const Eigen::VectorXd& query, int k,
                                               std::ptrdiff_t exclude) const {
    if (k <= 0) fail(Errc::InvalidParam, "k must be positive");
    if (entry_ < 0) return {};
    int ep = entry_;
    for (int lc = max_level_; lc > 0; --lc) ep = greedy_descend(query, ep, lc);
    const int ef = std::max(params_.ef_search, k + 1);
    std::vector<Hit> hits = search_layer(query, ep, ef, 0);

    std::vector<Neighbor> out;
    out.reserve(static_cast<std::size_t>(k));
    for (const Hit& h : hits) {
        if (h.node == static_cast<int>(exclude)) continue;
        out.push_back({ids_[static_cast<std::size_t>(h.node)], h.score});
        if (static_cast<int>(out.size()) == k) break;
    }
    // Ties inside the beam are ordered by node index; the public contract
    // orders them by item_id.
    std::sort(out.begin(), out.end(), neighbor_before);
    return out;
}

nlohmann::json HnswIndex::snapshot() const {
    return {{"format", "simindex-v1"},
            {"kind", "hnsw"},
            {"corpus_id", corpus_id_},
            {"space", std::string(to_string(space_))},
            {"params",
             {{"max_degree", params_.max_degree},
              {"ef_construction", params_.ef_construction},
              {"ef_search", params_.ef_search},
              {"seed", params_.seed}}},
            {"entry", entry_},
            {"max_level", max_level_},
            {"levels", levels_},
            {"adjacency", links_}};
}

}  // namespace pairforge
