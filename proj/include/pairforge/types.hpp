#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pairforge {

/// The three retrieval spaces a corpus carries embeddings for.
enum class SpaceTag { VisualSemantic, VisualPattern, CaptionText };

inline constexpr std::array<SpaceTag, 3> kAllSpaces = {
    SpaceTag::VisualSemantic, SpaceTag::VisualPattern, SpaceTag::CaptionText};

std::string_view to_string(SpaceTag tag);
std::optional<SpaceTag> space_from_string(std::string_view s);

struct EmbeddingVector {
    SpaceTag space = SpaceTag::VisualSemantic;
    Eigen::VectorXd values;

    Eigen::Index dim() const { return values.size(); }
};

/// One retrieval hit. Lists are kept sorted by descending score,
/// ties broken by ascending item_id.
struct Neighbor {
    std::string item_id;
    double score = 0.0;
};

/// Open cosine interval (lo, hi): both endpoints excluded.
struct SimilarityBand {
    double lo = -1.0;
    double hi = 1.0;

    bool contains(double score) const { return lo < score && score < hi; }
    bool valid() const { return -1.0 <= lo && lo < hi && hi <= 1.0; }
};

enum class Errc {
    DuplicateId,
    DimensionMismatch,
    ZeroNormVector,
    MalformedRecord,
    InvalidParam,
    UnknownSpace,
    EmptyCorpus,
    UnknownItem,
    NotEnoughPeers,
    BadPoolSize,
    ProviderUnavailable,
    MalformedProviderReply,
    TooFewInstructions,
    SpaceMismatch,
    BothAbsent,
    EmptyTemplate,
    NonFiniteLoss,
    MissingEmbedding,
    ShortNegatives,
    EmptyGroundTruth,
    EmptyRestriction,
    BadConfig,
    IoError,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    Errc code() const { return code_; }

  private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace pairforge
