#pragma once

#include "pairforge/corpus.hpp"
#include "pairforge/embedkit.hpp"
#include "pairforge/miner.hpp"
#include "pairforge/types.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace pairforge {

enum class TrainProfile { ClipStyle, MllmStyle };
enum class NegativeStrategy { None, QueryImage, Hard };

std::string_view to_string(TrainProfile profile);
std::string_view to_string(NegativeStrategy strategy);

/// Hard negatives carried per query: 4 for clip_style, 3 for mllm_style.
int profile_negatives(TrainProfile profile);

/// One optimizer step's worth of adapted-contrastive inputs. Vectors are
/// columns; hard-negative columns [i*m, (i+1)*m) belong to query i. When the
/// query-image negative arm is active, query_image_negatives has one column
/// per query, visible only inside that query's candidate row.
struct TrainingBatch {
    Eigen::MatrixXd queries;                 // dim x B
    Eigen::MatrixXd positives;               // dim x B
    Eigen::MatrixXd hard_negatives;          // dim x (B*m), 0x0 when m == 0
    Eigen::MatrixXd query_image_negatives;   // dim x B, 0x0 when unused

    Eigen::Index batch_size() const { return queries.cols(); }
    Eigen::Index dim() const { return queries.rows(); }
    Eigen::Index negatives_per_query() const {
        return batch_size() == 0 ? 0 : hard_negatives.cols() / batch_size();
    }
};

struct LossConfig {
    double temperature = 0.02;
    bool include_cross_query_negatives = true;
};

/// Linear maps over frozen provider embeddings: scores are
/// (W_txt q) . (W_img c) / temperature.
struct AdapterParams {
    Eigen::MatrixXd W_img;
    Eigen::MatrixXd W_txt;
};

AdapterParams identity_adapters(Eigen::Index dim);
/// Identity plus seeded N(0, noise^2) entries.
AdapterParams seeded_adapters(Eigen::Index dim, std::uint64_t seed, double noise = 1e-3);

struct LossResult {
    double loss = 0.0;
    Eigen::MatrixXd grad_W_img;
    Eigen::MatrixXd grad_W_txt;
};

/// Mean over queries of -log softmax(positive | candidates), log-sum-exp
/// stabilized, with analytic adapter gradients. Throws NonFiniteLoss when
/// anything overflows despite stabilization.
LossResult infonce_loss(const TrainingBatch& batch, const AdapterParams& adapters,
                        const LossConfig& cfg);

/// Central finite differences over every adapter entry; returns the max
/// relative error against the analytic gradients.
double grad_check(const TrainingBatch& batch, const AdapterParams& adapters,
                  const LossConfig& cfg, double h = 1e-5);

struct BatchAssembly {
    TrainProfile profile = TrainProfile::MllmStyle;
    NegativeStrategy negatives = NegativeStrategy::Hard;
    int batch_size = 16;
    std::uint64_t seed = 0;
    bool renormalize_fused = false;
    std::string task_inst = "retrieve the edited image";
};

/// Builds one epoch of batches: seeded shuffle per (seed, epoch), one
/// instruction per triplet sampled per (seed, pair), per-profile query
/// construction (score fusion or rendered-template provider embedding), and
/// candidate vectors from the visual-semantic space. A trailing partial
/// batch is dropped so every batch shares one size. Throws MissingEmbedding
/// / ShortNegatives / InvalidParam (unannotated triplet).
std::vector<TrainingBatch> assemble_batches(const std::vector<TripletRecord>& triplets,
                                            const Corpus& corpus, EmbeddingProvider& provider,
                                            const BatchAssembly& assembly, int epoch);

/// The seeded instruction pick assemble_batches makes for a triplet
/// (keyed by pair, so it is stable across epochs and batch positions).
const std::string& pick_instruction(const TripletRecord& triplet, std::uint64_t seed);

/// Query-side embedding for one triplet under the assembly profile — the
/// rendered-template provider embedding (mllm_style) or image+text score
/// fusion (clip_style). Exactly what assemble_batches puts in the queries
/// column, exposed so evaluation builds queries the same way training saw
/// them.
Eigen::VectorXd triplet_query_embedding(const TripletRecord& triplet,
                                        const std::string& instruction, const Corpus& corpus,
                                        EmbeddingProvider& provider,
                                        const BatchAssembly& assembly);

struct TrainStep {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainConfig {
    double lr0 = 5e-6;
    int steps = 2000;
    LossConfig loss;
};

struct TrainResult {
    AdapterParams adapters;
    std::vector<TrainStep> log;
};

/// Plain gradient descent with linear decay lr_t = lr0 * (1 - t/steps).
/// batch_at(t) supplies the batch for step t.
TrainResult train(AdapterParams init,
                  const std::function<const TrainingBatch&(int)>& batch_at,
                  const TrainConfig& cfg);

void write_train_log(const std::vector<TrainStep>& log, const std::filesystem::path& path);

void save_adapters(const AdapterParams& adapters, const LossConfig& cfg, std::uint64_t seed,
                   const std::filesystem::path& path);
AdapterParams load_adapters(const std::filesystem::path& path);

}  // namespace pairforge
