#pragma once

#include "pairforge/corpus.hpp"
#include "pairforge/miner.hpp"
#include "pairforge/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace pairforge {

struct Demo {
    std::string id;
    std::string query_caption;
    std::string target_caption;
    std::string description;
    std::vector<std::string> instructions;
};

/// The fixed 50-demonstration pool used by refine prompts.
const std::vector<Demo>& builtin_demo_pool();

std::vector<Demo> demo_pool_from_file(const std::filesystem::path& path);
void write_demo_pool(const std::vector<Demo>& pool, const std::filesystem::path& path);

struct PairDescription {
    std::pair<std::string, std::string> pair_key;  // (query_id, target_id)
    std::string text;
    int word_budget = 0;  // in [60, 100]
    std::string provider_id;
};

struct InstructionSet {
    std::pair<std::string, std::string> pair_key;
    std::vector<std::string> instructions;  // >= 3, pairwise distinct
    std::string provider_id;
};

enum class PromptStage { Describe, Refine };

struct PromptBundle {
    PromptStage stage = PromptStage::Describe;
    std::string rendered_prompt;
    int word_budget = 0;                          // Describe only
    std::vector<std::string> demonstrations_used;  // Refine only, 5 ids
    std::uint64_t rng_seed = 0;
};

/// Deterministic for (pair, seed); the prompt asks for a description of
/// word_budget = 60 + (seeded draw mod 41) words.
PromptBundle build_describe_prompt(const MinedPair& pair, std::uint64_t seed);

/// Requires a pool of exactly 50 demos (BadPoolSize otherwise); embeds five
/// distinct demos drawn seeded-uniformly, in selection order.
PromptBundle build_refine_prompt(const PairDescription& desc, const std::vector<Demo>& demo_pool,
                                 std::uint64_t seed);

struct DescribeRequest {
    std::string query_uri;
    std::string target_uri;
    std::string query_caption;
    std::string target_caption;
    std::string prompt;
};

/// Two-step annotation backend. Implementations throw ProviderUnavailable
/// for transient faults (retried by the orchestrator) and
/// MalformedProviderReply for unusable replies (not retried).
class AnnotationProvider {
  public:
    virtual ~AnnotationProvider() = default;
    virtual std::string id() const = 0;
    virtual std::string describe(const DescribeRequest& request) = 0;
    virtual std::vector<std::string> refine(const std::string& description,
                                            const std::string& prompt) = 0;
};

/// Deterministic provider: the description contrasts the two captions, the
/// refinement emits three instruction paraphrases embedding the target
/// caption (and so the pair identity). Pure function of (inputs, seed).
class MockAnnotationProvider : public AnnotationProvider {
  public:
    explicit MockAnnotationProvider(std::uint64_t seed) : seed_(seed) {}
    std::string id() const override { return "mock-annotator-v1"; }
    std::string describe(const DescribeRequest& request) override;
    std::vector<std::string> refine(const std::string& description,
                                    const std::string& prompt) override;

  private:
    std::uint64_t seed_;
};

/// JSON-over-HTTP provider: POST {endpoint}/v1/describe and /v1/refine.
/// Transport errors and non-200 statuses raise ProviderUnavailable; a 200
/// with an unusable body raises MalformedProviderReply.
class HttpAnnotationProvider : public AnnotationProvider {
  public:
    HttpAnnotationProvider(std::string host, int port, int timeout_ms = 5000);
    std::string id() const override { return id_; }
    std::string describe(const DescribeRequest& request) override;
    std::vector<std::string> refine(const std::string& description,
                                    const std::string& prompt) override;

  private:
    std::string host_;
    int port_;
    int timeout_ms_;
    std::string id_;
};

struct AnnotateOptions {
    std::uint64_t seed = 0;
    int max_retries = 3;   // transient-failure retries per call
    int backoff_ms = 25;   // first retry delay, doubled per attempt
    int max_inflight = 1;  // bounded parallelism for batch annotation
};

struct AnnotateStats {
    std::uint64_t annotated = 0;
    std::uint64_t retries = 0;
    std::uint64_t reasks = 0;
};

/// Normalization used for the distinctness rule: lowercase ASCII plus
/// whitespace collapse.
std::string normalized_instruction(const std::string& text);

/// Describe then Refine for one pair. Duplicates (after normalization) and
/// over-long (> 512 byte) instructions are discarded; when fewer than three
/// remain, one re-ask is issued before TooFewInstructions.
std::pair<PairDescription, InstructionSet> annotate_pair(const MinedPair& pair,
                                                         const Corpus& corpus,
                                                         AnnotationProvider& provider,
                                                         const std::vector<Demo>& demo_pool,
                                                         const AnnotateOptions& options,
                                                         AnnotateStats* stats = nullptr);

/// Fills instructions and provenance.annotator_id for every record, with at
/// most options.max_inflight concurrent provider calls. Results are
/// deterministic regardless of scheduling: every seed is keyed by pair.
AnnotateStats annotate_records(std::vector<TripletRecord>& records, const Corpus& corpus,
                               AnnotationProvider& provider, const std::vector<Demo>& demo_pool,
                               const AnnotateOptions& options);

}  // namespace pairforge
