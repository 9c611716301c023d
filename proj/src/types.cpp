#include "pairforge/types.hpp"

namespace pairforge {

std::string_view to_string(SpaceTag tag) {
    switch (tag) {
        case SpaceTag::VisualSemantic: return "vsem";
        case SpaceTag::VisualPattern: return "vpat";
        case SpaceTag::CaptionText: return "ctxt";
    }
    return "vsem";
}

std::optional<SpaceTag> space_from_string(std::string_view s) {
    if (s == "vsem") return SpaceTag::VisualSemantic;
    if (s == "vpat") return SpaceTag::VisualPattern;
    if (s == "ctxt") return SpaceTag::CaptionText;
    return std::nullopt;
}

std::string_view to_string(Errc code) {
    switch (code) {
        case Errc::DuplicateId: return "DuplicateId";
        case Errc::DimensionMismatch: return "DimensionMismatch";
        case Errc::ZeroNormVector: return "ZeroNormVector";
        case Errc::MalformedRecord: return "MalformedRecord";
        case Errc::InvalidParam: return "InvalidParam";
        case Errc::UnknownSpace: return "UnknownSpace";
        case Errc::EmptyCorpus: return "EmptyCorpus";
        case Errc::UnknownItem: return "UnknownItem";
        case Errc::NotEnoughPeers: return "NotEnoughPeers";
        case Errc::BadPoolSize: return "BadPoolSize";
        case Errc::ProviderUnavailable: return "ProviderUnavailable";
        case Errc::MalformedProviderReply: return "MalformedProviderReply";
        case Errc::TooFewInstructions: return "TooFewInstructions";
        case Errc::SpaceMismatch: return "SpaceMismatch";
        case Errc::BothAbsent: return "BothAbsent";
        case Errc::EmptyTemplate: return "EmptyTemplate";
        case Errc::NonFiniteLoss: return "NonFiniteLoss";
        case Errc::MissingEmbedding: return "MissingEmbedding";
        case Errc::ShortNegatives: return "ShortNegatives";
        case Errc::EmptyGroundTruth: return "EmptyGroundTruth";
        case Errc::EmptyRestriction: return "EmptyRestriction";
        case Errc::BadConfig: return "BadConfig";
        case Errc::IoError: return "IoError";
    }
    return "Error";
}

}  // namespace pairforge
