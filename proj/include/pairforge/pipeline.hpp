#pragma once

#include "pairforge/annotator.hpp"
#include "pairforge/corpus.hpp"
#include "pairforge/evalkit.hpp"
#include "pairforge/miner.hpp"
#include "pairforge/simindex.hpp"
#include "pairforge/trainer.hpp"
#include "pairforge/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pairforge {

/// Where a run's corpus comes from: generated in place or ingested from
/// disk. Exactly one of the two must be configured.
struct CorpusSource {
    std::optional<SyntheticSpec> synthetic;  // seed is overwritten by the run seed
    std::filesystem::path manifest_path;
    std::filesystem::path records_path;
};

struct ProviderEndpoint {
    std::string kind = "mock";  // "mock" | "http"
    std::string host;
    int port = 0;
    int timeout_ms = 5000;
};

struct AnnotateStageConfig {
    ProviderEndpoint provider;
    std::filesystem::path demo_pool_path;  // empty -> built-in pool
    int max_retries = 3;
    int backoff_ms = 25;
    int max_inflight = 1;
};

struct TrainStageConfig {
    TrainProfile profile = TrainProfile::MllmStyle;
    NegativeStrategy negatives = NegativeStrategy::Hard;
    double temperature = 0.02;
    double lr0 = 5e-6;
    int steps = 2000;
    int batch_size = 16;
    bool include_cross_query_negatives = true;
    double adapter_noise = 1e-3;
    std::string task_inst = "retrieve the edited image";
    std::size_t max_triplets = 0;  // 0 -> use everything annotated
    ProviderEndpoint embedder;     // text encoder for query construction
};

struct EvalStageConfig {
    std::vector<int> ks = {1, 5, 10};
    int holdout_queries = 200;      // pairs held out of training as eval queries
    std::filesystem::path task_dir; // when set, evaluate this saved task instead
};

/// One mining-spaces x negative-strategy combination. Space axes accept the
/// tags ("vsem", "vpat", "ctxt") or the single-letter aliases D = vpat,
/// I = vsem, T = ctxt.
struct AblationCell {
    std::vector<SpaceTag> spaces;
    NegativeStrategy negatives = NegativeStrategy::Hard;
};

struct AblateStageConfig {
    std::vector<AblationCell> cells;
    std::size_t budget = 20000;  // deduped triplets per cell
};

struct RunConfig {
    std::uint64_t seed = 0;  // mandatory in config files: no wall-clock default
    int workers = 1;
    std::filesystem::path out_dir;
    CorpusSource corpus;
    IndexKind index_kind = IndexKind::Exact;
    ApproxGraphParams approx;
    MiningParams mining;  // seed and workers are overwritten by the run's
    std::size_t shard_size = 5000;
    AnnotateStageConfig annotate;
    TrainStageConfig train;
    EvalStageConfig eval;
    AblateStageConfig ablate;
};

SpaceTag space_from_axis(const std::string& axis);
NegativeStrategy negatives_from_string(const std::string& name);
TrainProfile profile_from_string(const std::string& name);

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

/// Config invariants checked before any work: seed present (enforced at
/// parse), bands ordered, rates in range, every referenced path exists.
/// Throws InvalidParam.
void validate_config(const RunConfig& cfg);

// Stage entry points. Each loads its inputs from cfg.out_dir (or the
// configured corpus source), writes its artifacts into a fresh subdirectory
// of cfg.out_dir and never rewrites another stage's output.
//
//   corpus/    manifest.json, records.jsonl
//   index/     <space>.json snapshots
//   mined/     shard-*.jsonl, report.json      (instructions pending)
//   annotated/ shard-*.jsonl, stats.json
//   eval/      pairs.jsonl, annotated/, report.json, table.txt
//   train/     adapters.json, log.jsonl
void stage_corpus(const RunConfig& cfg);
void stage_index(const RunConfig& cfg);
void stage_mine(const RunConfig& cfg);
void stage_annotate(const RunConfig& cfg);
void stage_train(const RunConfig& cfg);
MetricReport stage_eval(const RunConfig& cfg);

/// corpus -> index -> mine -> annotate -> train -> eval, then the run
/// manifest. Failures are rethrown with the failing stage named; artifacts
/// written before the failure are retained.
MetricReport run_pipeline(const RunConfig& cfg);

/// The providers a run wires up. Mock flavors are seeded off the run seed;
/// http flavors require a configured endpoint (ProviderUnavailable
/// otherwise).
std::unique_ptr<AnnotationProvider> make_annotation_provider(const RunConfig& cfg);
std::unique_ptr<EmbeddingProvider> make_embedding_provider(const RunConfig& cfg,
                                                           const Corpus& corpus);

/// Builds the held-out retrieval task from annotated eval records with the
/// adapters applied to both sides (queries through W_txt, candidates through
/// W_img). Every query ranks the whole corpus minus its own item.
EvalTask holdout_eval_task(const RunConfig& cfg, const Corpus& corpus,
                           const std::vector<TripletRecord>& eval_records,
                           EmbeddingProvider& provider, const AdapterParams& adapters);

struct CellOutcome {
    std::string label;
    std::vector<SpaceTag> spaces;
    NegativeStrategy negatives = NegativeStrategy::Hard;
    std::size_t distinct_pairs = 0;  // after dedup, before the budget cut
    std::size_t used_triplets = 0;   // trained on, after budget + holdout cut
    MetricReport report;
    std::string error;  // non-empty when the cell failed
};

struct AblationOutcome {
    std::vector<CellOutcome> cells;
    std::string table;  // rendered comparison
};

/// Shared corpus, indices and held-out eval task; per cell mine -> annotate
/// -> train -> eval under one seed and an equalized triplet budget. A
/// failing cell is recorded and the remaining cells proceed.
AblationOutcome run_ablation(const RunConfig& cfg);
nlohmann::json ablation_to_json(const AblationOutcome& outcome);

/// Digests of the config and of every artifact beneath out_dir, so a run can
/// be re-derived and checked from the manifest alone. No timestamps.
nlohmann::json build_run_manifest(const RunConfig& cfg);
void write_run_manifest(const RunConfig& cfg);

}  // namespace pairforge
