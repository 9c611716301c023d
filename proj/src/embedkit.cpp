#include "pairforge/embedkit.hpp"

#include "pairforge/rng.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace pairforge {

FusedEmbedding fuse(const std::optional<EmbeddingVector>& image,
                    const std::optional<EmbeddingVector>& text, bool renormalize) {
    if (!image && !text) fail(Errc::BothAbsent, "fuse needs at least one encoder output");
    FusedEmbedding fused;
    if (image && text) {
        if (image->space != text->space) {
            fail(Errc::SpaceMismatch, std::string(to_string(image->space)) + " vs " +
                                          std::string(to_string(text->space)));
        }
        if (image->dim() != text->dim()) {
            fail(Errc::DimensionMismatch, "image dim " + std::to_string(image->dim()) +
                                              " vs text dim " + std::to_string(text->dim()));
        }
        fused.space = image->space;
        fused.values = image->values + text->values;
        fused.image_present = true;
        fused.text_present = true;
    } else {
        const EmbeddingVector& only = image ? *image : *text;
        fused.space = only.space;
        fused.values = only.values;
        fused.image_present = image.has_value();
        fused.text_present = text.has_value();
    }
    if (renormalize) {
        const double norm = fused.values.norm();
        if (!(norm > 1e-12)) fail(Errc::ZeroNormVector, "fused embedding has zero norm");
        fused.values /= norm;
    }
    return fused;
}

namespace {

constexpr const char* kInstructMark = "<instruct>";
constexpr const char* kQueryMark = "<query>";
constexpr const char* kEosMark = "[EOS]";

void reject_markers(const std::string& field, const char* name) {
    for (const char* marker : {kInstructMark, kQueryMark, kEosMark}) {
        if (field.find(marker) != std::string::npos) {
            fail(Errc::InvalidParam,
                 std::string(name) + " contains the literal marker " + marker);
        }
    }
}

}  // namespace

QueryTemplate QueryTemplate::create(std::string task_inst, std::string query_text,
                                    std::optional<std::string> query_image_ref) {
    if (task_inst.empty()) fail(Errc::EmptyTemplate, "task_inst is empty");
    if (query_text.empty() && (!query_image_ref || query_image_ref->empty())) {
        fail(Errc::EmptyTemplate, "need query text or a query image reference");
    }
    reject_markers(task_inst, "task_inst");
    reject_markers(query_text, "query_text");
    if (query_image_ref) reject_markers(*query_image_ref, "query_image_ref");

    QueryTemplate t;
    t.task_inst_ = std::move(task_inst);
    t.query_text_ = std::move(query_text);
    if (query_image_ref && !query_image_ref->empty()) t.query_image_ref_ = std::move(*query_image_ref);
    return t;
}

std::string render_query(const QueryTemplate& query) {
    std::string out = std::string(kInstructMark) + " " + query.task_inst() + " " + kQueryMark;
    if (!query.query_text().empty()) out += " " + query.query_text();
    if (query.query_image_ref()) out += " " + *query.query_image_ref();
    out += std::string(" ") + kEosMark;
    return out;
}

QueryTemplate parse_query(const std::string& rendered) {
    const std::string head = std::string(kInstructMark) + " ";
    const std::string mid = std::string(" ") + kQueryMark + " ";
    const std::string tail = std::string(" ") + kEosMark;
    if (rendered.rfind(head, 0) != 0) fail(Errc::MalformedRecord, "missing <instruct> frame");
    if (rendered.size() < tail.size() ||
        rendered.compare(rendered.size() - tail.size(), tail.size(), tail) != 0) {
        fail(Errc::MalformedRecord, "missing [EOS] frame");
    }
    const std::size_t mid_at = rendered.find(mid, head.size());
    if (mid_at == std::string::npos) fail(Errc::MalformedRecord, "missing <query> frame");

    const std::string task_inst = rendered.substr(head.size(), mid_at - head.size());
    const std::size_t slots_begin = mid_at + mid.size();
    const std::size_t slots_end = rendered.size() - tail.size();
    if (slots_end < slots_begin) fail(Errc::MalformedRecord, "empty query slots");
    const std::string slots = rendered.substr(slots_begin, slots_end - slots_begin);

    std::optional<std::string> image_ref;
    std::string query_text = slots;
    const std::size_t last_space = slots.rfind(' ');
    const std::string last_token =
        last_space == std::string::npos ? slots : slots.substr(last_space + 1);
    if (last_token.find("://") != std::string::npos) {
        image_ref = last_token;
        query_text = last_space == std::string::npos ? "" : slots.substr(0, last_space);
    }
    return QueryTemplate::create(task_inst, query_text, image_ref);
}

EmbeddingVector mllm_embed(const std::string& rendered, EmbeddingProvider& provider) {
    Eigen::VectorXd values = provider.embed(rendered);
    const double norm = values.norm();
    if (!(norm > 1e-12)) fail(Errc::ZeroNormVector, "provider returned a zero vector");
    EmbeddingVector out;
    out.space = provider.space();
    out.values = values / norm;
    return out;
}

Eigen::MatrixXd seeded_rotation(Eigen::Index dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "rotation"));
    Eigen::MatrixXd g(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) g(r, c) = rng.next_gaussian();
    }
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index c = 0; c < dim; ++c) {
        if (r(c, c) < 0) q.col(c) = -q.col(c);
    }
    return q;
}

namespace {

// An image reference contributes the referenced item's vector, but at reduced
// weight: a composed query is dominated by its text, and the image acts as
// context. At full weight the source and the edit target would enter the
// query embedding symmetrically, and no retriever could be asked to prefer
// the target over the source.
constexpr double kImageRefWeight = 0.35;

// Tokens are whitespace-delimited; a URI token stands for the item it
// locates, so it collapses to the part after the scheme.
std::string normalize_token(const std::string& token) {
    const std::size_t scheme = token.rfind("://");
    if (scheme != std::string::npos) return token.substr(scheme + 3);
    return token;
}

bool is_image_ref(const std::string& token) { return token.find("://") != std::string::npos; }

std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find_first_of(" \t\n\r", start);
        if (end == std::string::npos) end = text.size();
        if (end > start) tokens.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return tokens;
}

}  // namespace

MockEmbeddingProvider::MockEmbeddingProvider(const Corpus& corpus, SpaceTag space,
                                             std::uint64_t seed)
    : space_(space), seed_(seed) {
    dim_ = corpus.space_dim(space);

    std::unordered_map<std::string, Eigen::VectorXd> sums;
    std::unordered_map<std::string, std::uint64_t> doc_freq;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const CorpusItem& item = corpus.item(i);
        const std::vector<std::string> tokens = split_tokens(item.caption);
        const std::set<std::string> unique(tokens.begin(), tokens.end());
        const Eigen::VectorXd& v = corpus.vector_at(i, space);
        for (const auto& token : unique) {
            auto [it, inserted] = sums.emplace(token, Eigen::VectorXd::Zero(dim_));
            it->second += v;
            ++doc_freq[token];
        }
    }
    const double n = static_cast<double>(corpus.size());
    for (auto& [token, sum] : sums) {
        const double norm = sum.norm();
        if (!(norm > 1e-12)) continue;
        const double idf = std::log(1.0 + n / static_cast<double>(doc_freq[token]));
        token_table_.emplace(token, (idf / norm) * sum);
    }
    rotation_ = seeded_rotation(dim_, seed);
}

Eigen::VectorXd MockEmbeddingProvider::embed(const std::string& text) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
    for (const auto& raw : split_tokens(text)) {
        auto it = token_table_.find(normalize_token(raw));
        if (it == token_table_.end()) continue;
        v += is_image_ref(raw) ? (kImageRefWeight * it->second).eval() : it->second;
    }
    // Text-keyed perturbation: keeps unknown-only texts embeddable and
    // distinct without disturbing the token geometry.
    Rng rng(mix_seed(derive_seed(seed_, "text-noise"), hash64(text)));
    for (Eigen::Index i = 0; i < dim_; ++i) v[i] += 1e-4 * rng.next_gaussian();
    return rotation_ * v;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(std::string host, int port, SpaceTag space,
                                             int timeout_ms)
    : host_(std::move(host)), port_(port), space_(space), timeout_ms_(timeout_ms) {
    id_ = "http-embedder:" + host_ + ":" + std::to_string(port_);
}

Eigen::VectorXd HttpEmbeddingProvider::embed(const std::string& text) {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(0, timeout_ms_ * 1000);
    client.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
    auto res = client.Post("/v1/embed", nlohmann::json{{"text", text}}.dump(),
                           "application/json");
    if (!res) fail(Errc::ProviderUnavailable, "/v1/embed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        fail(Errc::ProviderUnavailable, "/v1/embed: HTTP " + std::to_string(res->status));
    }
    const nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("values") || !reply["values"].is_array()) {
        fail(Errc::MalformedProviderReply, "/v1/embed: missing values");
    }
    Eigen::VectorXd out(static_cast<Eigen::Index>(reply["values"].size()));
    Eigen::Index i = 0;
    for (const auto& x : reply["values"]) {
        if (!x.is_number()) fail(Errc::MalformedProviderReply, "/v1/embed: non-numeric value");
        out[i++] = x.get<double>();
    }
    return out;
}

}  // namespace pairforge
