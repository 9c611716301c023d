#pragma once

#include "pairforge/corpus.hpp"
#include "pairforge/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace pairforge {

struct FusedEmbedding {
    SpaceTag space = SpaceTag::VisualSemantic;
    Eigen::VectorXd values;
    bool image_present = false;
    bool text_present = false;

    Eigen::Index dim() const { return values.size(); }
};

/// Elementwise sum of the two encoder outputs; pass-through when one side is
/// absent. Not renormalized unless asked (downstream losses consume raw dot
/// products). Throws DimensionMismatch / SpaceMismatch / BothAbsent.
FusedEmbedding fuse(const std::optional<EmbeddingVector>& image,
                    const std::optional<EmbeddingVector>& text, bool renormalize = false);

/// The building blocks of a rendered retrieval query:
/// "<instruct> {task_inst} <query> {q_t} {q_i} [EOS]".
/// Fields containing a literal marker are rejected at construction, which
/// keeps rendering unambiguous.
class QueryTemplate {
  public:
    /// task_inst must be non-empty and at least one of query_text /
    /// query_image_ref must be present (EmptyTemplate otherwise); any field
    /// containing "<instruct>", "<query>" or "[EOS]" raises InvalidParam.
    static QueryTemplate create(std::string task_inst, std::string query_text,
                                std::optional<std::string> query_image_ref);

    const std::string& task_inst() const { return task_inst_; }
    const std::string& query_text() const { return query_text_; }
    const std::optional<std::string>& query_image_ref() const { return query_image_ref_; }

  private:
    QueryTemplate() = default;
    std::string task_inst_;
    std::string query_text_;  // empty means absent
    std::optional<std::string> query_image_ref_;
};

/// Single-space rendering with absent slots (and their separators) omitted.
std::string render_query(const QueryTemplate& query);

/// Recovers the template fields from a rendered string. The trailing slot
/// token is taken as the image reference iff it contains "://"; a q_t whose
/// final token contains "://" is therefore indistinguishable from an image
/// reference. Throws MalformedRecord when the frame markers are missing.
QueryTemplate parse_query(const std::string& rendered);

class EmbeddingProvider {
  public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string id() const = 0;
    virtual SpaceTag space() const = 0;
    virtual Eigen::VectorXd embed(const std::string& text) = 0;
};

/// Provider output L2-normalized regardless of provider behavior.
/// Throws ZeroNormVector on a zero reply.
EmbeddingVector mllm_embed(const std::string& rendered, EmbeddingProvider& provider);

/// Deterministic text encoder grounded in a corpus: each caption token maps
/// to the idf-weighted normalized sum of the embeddings of items whose
/// caption contains it, a text's vector is the sum over its known tokens
/// plus a tiny text-keyed perturbation, and the result is passed through a
/// seeded orthogonal rotation. The rotation makes raw provider outputs
/// useless for retrieval until an adapter learns to undo it, while keeping
/// an exactly-representable linear optimum.
class MockEmbeddingProvider : public EmbeddingProvider {
  public:
    MockEmbeddingProvider(const Corpus& corpus, SpaceTag space, std::uint64_t seed);

    std::string id() const override { return "mock-embedder-v1"; }
    SpaceTag space() const override { return space_; }
    Eigen::VectorXd embed(const std::string& text) override;

    const Eigen::MatrixXd& rotation() const { return rotation_; }

  private:
    SpaceTag space_;
    std::uint64_t seed_;
    Eigen::Index dim_ = 0;
    std::unordered_map<std::string, Eigen::VectorXd> token_table_;
    Eigen::MatrixXd rotation_;
};

/// JSON-over-HTTP text encoder: POST {endpoint}/v1/embed {"text"} ->
/// {"values": [..]}. Same error mapping as the annotation provider.
class HttpEmbeddingProvider : public EmbeddingProvider {
  public:
    HttpEmbeddingProvider(std::string host, int port, SpaceTag space, int timeout_ms = 5000);

    std::string id() const override { return id_; }
    SpaceTag space() const override { return space_; }
    Eigen::VectorXd embed(const std::string& text) override;

  private:
    std::string host_;
    int port_;
    SpaceTag space_;
    int timeout_ms_;
    std::string id_;
};

/// Seeded orthogonal matrix (QR of a seeded Gaussian matrix with a fixed
/// sign convention). Exposed for tests.
Eigen::MatrixXd seeded_rotation(Eigen::Index dim, std::uint64_t seed);

}  // namespace pairforge
