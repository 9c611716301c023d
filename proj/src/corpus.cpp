#include "pairforge/corpus.hpp"

#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace pairforge {

namespace {

constexpr double kZeroNormEps = 1e-12;
// Tighter than the 1e-6 post-ingestion invariant so an already-normalized
// vector is never re-divided; this keeps ingest(emit(corpus)) bitwise stable.
constexpr double kSkipNormalizeEps = 1e-9;

void normalize_in_place(Eigen::VectorXd& v, const std::string& item_id, SpaceTag tag) {
    const double norm = v.norm();
    if (!(norm > kZeroNormEps)) {
        fail(Errc::ZeroNormVector, "item '" + item_id + "' space " + std::string(to_string(tag)));
    }
    if (std::abs(norm - 1.0) > kSkipNormalizeEps) v /= norm;
}

}  // namespace

Corpus::Corpus(CorpusManifest manifest, std::vector<CorpusItem> items)
    : manifest_(std::move(manifest)), items_(std::move(items)) {
    index_.reserve(items_.size());
    for (std::size_t i = 0; i < items_.size(); ++i) {
        auto [it, inserted] = index_.emplace(items_[i].item_id, i);
        if (!inserted) fail(Errc::DuplicateId, items_[i].item_id);
    }
}

const CorpusItem* Corpus::find(const std::string& item_id) const {
    auto it = index_.find(item_id);
    return it == index_.end() ? nullptr : &items_[it->second];
}

std::size_t Corpus::index_of(const std::string& item_id) const {
    auto it = index_.find(item_id);
    if (it == index_.end()) fail(Errc::UnknownItem, item_id);
    return it->second;
}

bool Corpus::has_space(SpaceTag tag) const {
    for (const auto& [t, dim] : manifest_.spaces) {
        if (t == tag) return true;
    }
    return false;
}

int Corpus::space_dim(SpaceTag tag) const {
    for (const auto& [t, dim] : manifest_.spaces) {
        if (t == tag) return dim;
    }
    fail(Errc::UnknownSpace, std::string(to_string(tag)));
}

const Eigen::VectorXd& Corpus::vector_of(const std::string& item_id, SpaceTag tag) const {
    return vector_at(index_of(item_id), tag);
}

const Eigen::VectorXd& Corpus::vector_at(std::size_t index, SpaceTag tag) const {
    const auto& embeddings = items_[index].embeddings;
    auto it = embeddings.find(tag);
    if (it == embeddings.end()) {
        fail(Errc::MissingEmbedding,
             items_[index].item_id + " space " + std::string(to_string(tag)));
    }
    return it->second;
}

Eigen::MatrixXd Corpus::stacked(SpaceTag tag) const {
    const int dim = space_dim(tag);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(items_.size()), dim);
    for (std::size_t i = 0; i < items_.size(); ++i) {
        m.row(static_cast<Eigen::Index>(i)) = vector_at(i, tag).transpose();
    }
    return m;
}

CorpusManifest manifest_from_json(const nlohmann::json& j) {
    CorpusManifest m;
    try {
        m.corpus_id = j.at("corpus_id").get<std::string>();
        m.item_count = j.at("item_count").get<std::uint64_t>();
        m.created_at = j.at("created_at").get<std::string>();
        if (j.contains("seed") && !j["seed"].is_null()) {
            m.seed = j["seed"].get<std::uint64_t>();
        }
        std::set<std::string> seen;
        for (const auto& s : j.at("spaces")) {
            const std::string tag_s = s.at("tag").get<std::string>();
            const auto tag = space_from_string(tag_s);
            if (!tag) fail(Errc::UnknownSpace, tag_s);
            if (!seen.insert(tag_s).second) fail(Errc::InvalidParam, "duplicate space " + tag_s);
            const int dim = s.at("dim").get<int>();
            if (dim <= 0) fail(Errc::InvalidParam, "non-positive dim for space " + tag_s);
            m.spaces.emplace_back(*tag, dim);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("manifest: ") + e.what());
    }
    if (m.spaces.empty()) fail(Errc::InvalidParam, "manifest declares no spaces");
    return m;
}

nlohmann::json manifest_to_json(const CorpusManifest& manifest) {
    nlohmann::json spaces = nlohmann::json::array();
    for (const auto& [tag, dim] : manifest.spaces) {
        spaces.push_back({{"tag", std::string(to_string(tag))}, {"dim", dim}});
    }
    nlohmann::json j{{"corpus_id", manifest.corpus_id},
                     {"spaces", spaces},
                     {"item_count", manifest.item_count},
                     {"created_at", manifest.created_at}};
    if (manifest.seed) j["seed"] = *manifest.seed;
    return j;
}

CorpusItem record_from_json(const nlohmann::json& j, std::size_t line_no) {
    CorpusItem item;
    try {
        item.item_id = j.at("item_id").get<std::string>();
        item.caption = j.at("caption").get<std::string>();
        if (j.contains("payload_uri") && !j["payload_uri"].is_null()) {
            item.payload_uri = j["payload_uri"].get<std::string>();
        }
        for (const auto& [key, values] : j.at("embeddings").items()) {
            const auto tag = space_from_string(key);
            if (!tag) fail(Errc::UnknownSpace, key);
            Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
            Eigen::Index i = 0;
            for (const auto& x : values) {
                const double value = x.get<double>();
                if (!std::isfinite(value)) {
                    fail(Errc::MalformedRecord,
                         "non-finite embedding entry at line " + std::to_string(line_no));
                }
                v[i++] = value;
            }
            item.embeddings[*tag] = std::move(v);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
    return item;
}

nlohmann::json record_to_json(const CorpusItem& item) {
    nlohmann::json embeddings = nlohmann::json::object();
    for (const auto& [tag, v] : item.embeddings) {
        nlohmann::json arr = nlohmann::json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
        embeddings[std::string(to_string(tag))] = std::move(arr);
    }
    nlohmann::json j{{"item_id", item.item_id},
                     {"caption", item.caption},
                     {"embeddings", std::move(embeddings)}};
    j["payload_uri"] = item.payload_uri ? nlohmann::json(*item.payload_uri) : nlohmann::json();
    return j;
}

Corpus assemble_corpus(CorpusManifest manifest, std::vector<CorpusItem> records) {
    for (auto& item : records) {
        if (item.embeddings.size() != manifest.spaces.size()) {
            fail(Errc::DimensionMismatch,
                 "item '" + item.item_id + "' carries " + std::to_string(item.embeddings.size()) +
                     " spaces, manifest declares " + std::to_string(manifest.spaces.size()));
        }
        for (const auto& [tag, dim] : manifest.spaces) {
            auto it = item.embeddings.find(tag);
            if (it == item.embeddings.end()) {
                fail(Errc::DimensionMismatch,
                     "item '" + item.item_id + "' missing space " + std::string(to_string(tag)));
            }
            if (it->second.size() != dim) {
                fail(Errc::DimensionMismatch,
                     "item '" + item.item_id + "' space " + std::string(to_string(tag)) +
                         ": expected " + std::to_string(dim) + ", got " +
                         std::to_string(it->second.size()));
            }
            normalize_in_place(it->second, item.item_id, tag);
        }
    }
    manifest.item_count = records.size();
    return Corpus(std::move(manifest), std::move(records));
}

Corpus ingest_corpus(const std::filesystem::path& manifest_path,
                     const std::filesystem::path& records_path) {
    CorpusManifest manifest = manifest_from_json(read_json(manifest_path));
    std::vector<CorpusItem> records;
    for_each_line(records_path, [&](std::size_t line_no, const std::string& line) {
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(Errc::MalformedRecord, "line " + std::to_string(line_no) + ": invalid JSON");
        }
        records.push_back(record_from_json(j, line_no));
    });
    return assemble_corpus(std::move(manifest), std::move(records));
}

void emit_corpus(const Corpus& corpus, const std::filesystem::path& manifest_path,
                 const std::filesystem::path& records_path) {
    write_file(manifest_path, manifest_to_json(corpus.manifest()).dump(2) + "\n");
    std::ostringstream lines;
    for (const auto& item : corpus.items()) lines << record_to_json(item).dump() << "\n";
    write_file(records_path, lines.str());
}

namespace {

/// Unit vector at expected cosine sqrt(rho)^2-free of the noise term:
/// sqrt(rho) * center + sqrt(1-rho) * u, with u a unit vector orthogonal to
/// the center, so intra-cluster pairs have expected cosine exactly rho.
Eigen::VectorXd clustered_point(const Eigen::VectorXd& center, double rho, Rng& rng) {
    const Eigen::Index dim = center.size();
    Eigen::VectorXd noise(dim);
    for (Eigen::Index i = 0; i < dim; ++i) noise[i] = rng.next_gaussian();
    noise -= noise.dot(center) * center;
    double norm = noise.norm();
    while (!(norm > 1e-9)) {  // astronomically unlikely; redraw keeps the stream defined
        for (Eigen::Index i = 0; i < dim; ++i) noise[i] = rng.next_gaussian();
        noise -= noise.dot(center) * center;
        norm = noise.norm();
    }
    return std::sqrt(rho) * center + std::sqrt(1.0 - rho) * (noise / norm);
}

Eigen::VectorXd random_unit(Eigen::Index dim, Rng& rng) {
    Eigen::VectorXd v(dim);
    double norm = 0.0;
    do {
        for (Eigen::Index i = 0; i < dim; ++i) v[i] = rng.next_gaussian();
        norm = v.norm();
    } while (!(norm > 1e-9));
    return v / norm;
}

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticSpec& spec) {
    if (spec.n_clusters <= 0 || spec.items_per_cluster <= 0) {
        fail(Errc::InvalidParam, "cluster counts must be positive");
    }
    if (!(spec.intra_cluster_cos > 0.0 && spec.intra_cluster_cos < 1.0)) {
        fail(Errc::InvalidParam, "intra_cluster_cos must lie in (0, 1)");
    }
    if (!(spec.cross_space_decorrelation >= 0.0 && spec.cross_space_decorrelation <= 1.0)) {
        fail(Errc::InvalidParam, "cross_space_decorrelation must lie in [0, 1]");
    }
    for (SpaceTag tag : kAllSpaces) {
        auto it = spec.dims.find(tag);
        if (it == spec.dims.end() || it->second <= 0) {
            fail(Errc::InvalidParam,
                 "dims must cover space " + std::string(to_string(tag)) + " with a positive size");
        }
    }

    const int n_items = spec.n_clusters * spec.items_per_cluster;

    // Per-space cluster centers.
    std::map<SpaceTag, std::vector<Eigen::VectorXd>> centers;
    for (SpaceTag tag : kAllSpaces) {
        Rng rng(derive_seed(spec.seed, "centers", to_string(tag)));
        auto& cs = centers[tag];
        cs.reserve(static_cast<std::size_t>(spec.n_clusters));
        for (int c = 0; c < spec.n_clusters; ++c) {
            cs.push_back(random_unit(spec.dims.at(tag), rng));
        }
    }

    // Cluster membership: the visual-semantic assignment is the primary one;
    // the other two spaces re-draw it per item with the configured probability.
    std::map<SpaceTag, std::vector<int>> membership;
    {
        std::vector<int> primary(static_cast<std::size_t>(n_items));
        for (int i = 0; i < n_items; ++i) primary[static_cast<std::size_t>(i)] = i / spec.items_per_cluster;
        membership[SpaceTag::VisualSemantic] = primary;
        for (SpaceTag tag : {SpaceTag::VisualPattern, SpaceTag::CaptionText}) {
            Rng rng(derive_seed(spec.seed, "membership", to_string(tag)));
            std::vector<int> assign = primary;
            for (int i = 0; i < n_items; ++i) {
                if (rng.next_unit() < spec.cross_space_decorrelation) {
                    assign[static_cast<std::size_t>(i)] =
                        static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.n_clusters)));
                }
            }
            membership[tag] = std::move(assign);
        }
    }

    std::vector<CorpusItem> items;
    items.reserve(static_cast<std::size_t>(n_items));
    std::map<SpaceTag, Rng> point_rng;
    for (SpaceTag tag : kAllSpaces) {
        point_rng.emplace(tag, Rng(derive_seed(spec.seed, "points", to_string(tag))));
    }
    char buf[64];
    for (int i = 0; i < n_items; ++i) {
        CorpusItem item;
        std::snprintf(buf, sizeof(buf), "item-%06d", i);
        item.item_id = buf;
        const int cluster = membership[SpaceTag::VisualSemantic][static_cast<std::size_t>(i)];
        std::snprintf(buf, sizeof(buf), "motif-%03d", cluster);
        item.caption = "a photo of " + std::string(buf) + " with detail " + item.item_id +
                       " in style-" + std::to_string(i % 7);
        item.payload_uri = "img://" + item.item_id;
        for (SpaceTag tag : kAllSpaces) {
            const int c = membership[tag][static_cast<std::size_t>(i)];
            item.embeddings[tag] = clustered_point(centers[tag][static_cast<std::size_t>(c)],
                                                   spec.intra_cluster_cos, point_rng.at(tag));
        }
        items.push_back(std::move(item));
    }

    CorpusManifest manifest;
    manifest.corpus_id = "synth-" + std::to_string(spec.seed) + "-" +
                         std::to_string(spec.n_clusters) + "x" +
                         std::to_string(spec.items_per_cluster);
    for (SpaceTag tag : kAllSpaces) manifest.spaces.emplace_back(tag, spec.dims.at(tag));
    manifest.item_count = static_cast<std::uint64_t>(n_items);
    manifest.created_at = "1970-01-01T00:00:00Z";  // fixed: generation is a pure function
    manifest.seed = spec.seed;

    return assemble_corpus(std::move(manifest), std::move(items));
}

int synthetic_cluster_of(const std::string& caption) {
    const std::string marker = "motif-";
    const auto pos = caption.find(marker);
    if (pos == std::string::npos) return -1;
    int value = 0;
    std::size_t i = pos + marker.size();
    if (i >= caption.size() || !std::isdigit(static_cast<unsigned char>(caption[i]))) return -1;
    for (; i < caption.size() && std::isdigit(static_cast<unsigned char>(caption[i])); ++i) {
        value = value * 10 + (caption[i] - '0');
    }
    return value;
}

}  // namespace pairforge
