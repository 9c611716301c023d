#include "pairforge/trainer.hpp"

#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace pairforge {

std::string_view to_string(TrainProfile profile) {
    return profile == TrainProfile::ClipStyle ? "clip_style" : "mllm_style";
}

std::string_view to_string(NegativeStrategy strategy) {
    switch (strategy) {
        case NegativeStrategy::None: return "none";
        case NegativeStrategy::QueryImage: return "query";
        case NegativeStrategy::Hard: return "hard";
    }
    return "hard";
}

int profile_negatives(TrainProfile profile) {
    return profile == TrainProfile::ClipStyle ? 4 : 3;
}

AdapterParams identity_adapters(Eigen::Index dim) {
    return {Eigen::MatrixXd::Identity(dim, dim), Eigen::MatrixXd::Identity(dim, dim)};
}

AdapterParams seeded_adapters(Eigen::Index dim, std::uint64_t seed, double noise) {
    AdapterParams params = identity_adapters(dim);
    Rng rng(derive_seed(seed, "adapters"));
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) params.W_img(r, c) += noise * rng.next_gaussian();
    }
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) params.W_txt(r, c) += noise * rng.next_gaussian();
    }
    return params;
}

namespace {

void check_batch(const TrainingBatch& batch, const LossConfig& cfg) {
    const Eigen::Index b = batch.batch_size();
    const Eigen::Index d = batch.dim();
    if (b < 1) fail(Errc::InvalidParam, "batch is empty");
    if (!(cfg.temperature > 0.0)) fail(Errc::InvalidParam, "temperature must be positive");
    if (batch.positives.rows() != d || batch.positives.cols() != b) {
        fail(Errc::InvalidParam, "positives shape does not match queries");
    }
    if (batch.hard_negatives.size() > 0) {
        if (batch.hard_negatives.rows() != d || batch.hard_negatives.cols() % b != 0) {
            fail(Errc::InvalidParam, "hard negatives must be dim x (B*m)");
        }
    }
    if (batch.query_image_negatives.size() > 0 &&
        (batch.query_image_negatives.rows() != d || batch.query_image_negatives.cols() != b)) {
        fail(Errc::InvalidParam, "query-image negatives must be dim x B");
    }
}

}  // namespace

LossResult infonce_loss(const TrainingBatch& batch, const AdapterParams& adapters,
                        const LossConfig& cfg) {
    check_batch(batch, cfg);
    const Eigen::Index b = batch.batch_size();
    const Eigen::Index d = batch.dim();
    const Eigen::Index m = batch.negatives_per_query();
    const bool has_qneg = batch.query_image_negatives.size() > 0;
    const Eigen::Index shared = b + b * m;            // columns every query may see
    const Eigen::Index n = shared + (has_qneg ? b : 0);
    const double inv_tau = 1.0 / cfg.temperature;

    Eigen::MatrixXd candidates(d, n);
    candidates.leftCols(b) = batch.positives;
    if (m > 0) candidates.middleCols(b, b * m) = batch.hard_negatives;
    if (has_qneg) candidates.rightCols(b) = batch.query_image_negatives;

    const Eigen::MatrixXd q_adapted = adapters.W_txt * batch.queries;    // d x B
    const Eigen::MatrixXd c_adapted = adapters.W_img * candidates;      // d x N

    Eigen::MatrixXd scores = (q_adapted.transpose() * c_adapted) * inv_tau;  // B x N

    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < b; ++i) {
        if (!cfg.include_cross_query_negatives) {
            for (Eigen::Index c = 0; c < b; ++c) {
                if (c != i) scores(i, c) = neg_inf;
            }
            for (Eigen::Index c = 0; c < b * m; ++c) {
                if (c / m != i) scores(i, b + c) = neg_inf;
            }
        }
        if (has_qneg) {
            // A query's own image joins only that query's candidate set.
            for (Eigen::Index c = 0; c < b; ++c) {
                if (c != i) scores(i, shared + c) = neg_inf;
            }
        }
    }

    double loss = 0.0;
    Eigen::MatrixXd softmax(b, n);
    for (Eigen::Index i = 0; i < b; ++i) {
        const double row_max = scores.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
            const double s = scores(i, c);
            const double e = s == neg_inf ? 0.0 : std::exp(s - row_max);
            softmax(i, c) = e;
            sum += e;
        }
        const double lse = row_max + std::log(sum);
        loss += lse - scores(i, i);
        softmax.row(i) /= sum;
    }
    loss /= static_cast<double>(b);
    if (!std::isfinite(loss)) fail(Errc::NonFiniteLoss, "loss is not finite");

    Eigen::MatrixXd dscores = softmax;
    for (Eigen::Index i = 0; i < b; ++i) dscores(i, i) -= 1.0;
    dscores *= inv_tau / static_cast<double>(b);

    LossResult result;
    result.loss = loss;
    result.grad_W_txt = (c_adapted * dscores.transpose()) * batch.queries.transpose();
    result.grad_W_img = (q_adapted * dscores) * candidates.transpose();
    if (!result.grad_W_txt.allFinite() || !result.grad_W_img.allFinite()) {
        fail(Errc::NonFiniteLoss, "gradient is not finite");
    }
    return result;
}

double grad_check(const TrainingBatch& batch, const AdapterParams& adapters,
                  const LossConfig& cfg, double h) {
    const LossResult analytic = infonce_loss(batch, adapters, cfg);
    double max_rel = 0.0;
    const auto probe = [&](Eigen::MatrixXd AdapterParams::* member, const Eigen::MatrixXd& grad) {
        AdapterParams perturbed = adapters;
        Eigen::MatrixXd& w = perturbed.*member;
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) {
                const double saved = w(r, c);
                w(r, c) = saved + h;
                const double up = infonce_loss(batch, perturbed, cfg).loss;
                w(r, c) = saved - h;
                const double down = infonce_loss(batch, perturbed, cfg).loss;
                w(r, c) = saved;
                const double numeric = (up - down) / (2.0 * h);
                const double a = grad(r, c);
                const double rel =
                    std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
                max_rel = std::max(max_rel, rel);
            }
        }
    };
    probe(&AdapterParams::W_img, analytic.grad_W_img);
    probe(&AdapterParams::W_txt, analytic.grad_W_txt);
    return max_rel;
}

const std::string& pick_instruction(const TripletRecord& triplet, std::uint64_t seed) {
    const std::string pair_key = triplet.query_id + "|" + triplet.target_id;
    if (triplet.instructions.empty()) {
        fail(Errc::InvalidParam, "triplet " + pair_key + " is not annotated yet");
    }
    Rng pick_rng(derive_seed(seed, "instr", pair_key));
    return triplet.instructions[pick_rng.next_below(triplet.instructions.size())];
}

Eigen::VectorXd triplet_query_embedding(const TripletRecord& triplet,
                                        const std::string& instruction, const Corpus& corpus,
                                        EmbeddingProvider& provider,
                                        const BatchAssembly& assembly) {
    const CorpusItem* query_item = corpus.find(triplet.query_id);
    if (!query_item) fail(Errc::MissingEmbedding, triplet.query_id);
    if (assembly.profile == TrainProfile::MllmStyle) {
        const std::string image_ref =
            query_item->payload_uri ? *query_item->payload_uri : "img://" + triplet.query_id;
        const QueryTemplate tpl = QueryTemplate::create(assembly.task_inst, instruction, image_ref);
        return mllm_embed(render_query(tpl), provider).values;
    }
    auto it = query_item->embeddings.find(SpaceTag::VisualSemantic);
    if (it == query_item->embeddings.end()) fail(Errc::MissingEmbedding, triplet.query_id);
    const EmbeddingVector image{provider.space(), it->second};
    const EmbeddingVector text = mllm_embed(instruction, provider);
    return fuse(image, text, assembly.renormalize_fused).values;
}

std::vector<TrainingBatch> assemble_batches(const std::vector<TripletRecord>& triplets,
                                            const Corpus& corpus, EmbeddingProvider& provider,
                                            const BatchAssembly& assembly, int epoch) {
    if (assembly.batch_size < 1) fail(Errc::InvalidParam, "batch_size must be positive");
    const int m_needed =
        assembly.negatives == NegativeStrategy::Hard ? profile_negatives(assembly.profile) : 0;
    const SpaceTag candidate_space = SpaceTag::VisualSemantic;
    const Eigen::Index dim = corpus.space_dim(candidate_space);

    std::vector<std::size_t> order(triplets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(assembly.seed, "shuffle", std::to_string(epoch)));
    shuffle_rng.shuffle(order);

    const auto vector_of = [&](const std::string& id) -> const Eigen::VectorXd& {
        const CorpusItem* item = corpus.find(id);
        if (!item) fail(Errc::MissingEmbedding, id);
        auto it = item->embeddings.find(candidate_space);
        if (it == item->embeddings.end()) fail(Errc::MissingEmbedding, id);
        return it->second;
    };

    const std::size_t b = static_cast<std::size_t>(assembly.batch_size);
    const std::size_t full_batches = triplets.size() / b;
    std::vector<TrainingBatch> batches;
    batches.reserve(full_batches);

    for (std::size_t batch_no = 0; batch_no < full_batches; ++batch_no) {
        TrainingBatch batch;
        batch.queries.resize(dim, static_cast<Eigen::Index>(b));
        batch.positives.resize(dim, static_cast<Eigen::Index>(b));
        if (m_needed > 0) batch.hard_negatives.resize(dim, static_cast<Eigen::Index>(b) * m_needed);
        if (assembly.negatives == NegativeStrategy::QueryImage) {
            batch.query_image_negatives.resize(dim, static_cast<Eigen::Index>(b));
        }

        for (std::size_t slot = 0; slot < b; ++slot) {
            const TripletRecord& t = triplets[order[batch_no * b + slot]];
            const std::string pair_key = t.query_id + "|" + t.target_id;
            const std::string& instruction = pick_instruction(t, assembly.seed);

            batch.queries.col(static_cast<Eigen::Index>(slot)) =
                triplet_query_embedding(t, instruction, corpus, provider, assembly);
            batch.positives.col(static_cast<Eigen::Index>(slot)) = vector_of(t.target_id);
            if (m_needed > 0) {
                if (static_cast<int>(t.hard_negative_ids.size()) < m_needed) {
                    fail(Errc::ShortNegatives,
                         pair_key + ": have " + std::to_string(t.hard_negative_ids.size()) +
                             ", need " + std::to_string(m_needed));
                }
                Rng neg_rng(derive_seed(assembly.seed, "negsel", pair_key));
                const std::vector<std::size_t> picks = neg_rng.sample_without_replacement(
                    t.hard_negative_ids.size(), static_cast<std::size_t>(m_needed));
                for (int j = 0; j < m_needed; ++j) {
                    batch.hard_negatives.col(static_cast<Eigen::Index>(slot) * m_needed + j) =
                        vector_of(t.hard_negative_ids[picks[static_cast<std::size_t>(j)]]);
                }
            }
            if (assembly.negatives == NegativeStrategy::QueryImage) {
                batch.query_image_negatives.col(static_cast<Eigen::Index>(slot)) =
                    vector_of(t.query_id);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

TrainResult train(AdapterParams init, const std::function<const TrainingBatch&(int)>& batch_at,
                  const TrainConfig& cfg) {
    if (cfg.steps < 1) fail(Errc::InvalidParam, "steps must be positive");
    if (cfg.lr0 < 0.0) fail(Errc::InvalidParam, "lr0 must be nonnegative");
    TrainResult result;
    result.adapters = std::move(init);
    result.log.reserve(static_cast<std::size_t>(cfg.steps));
    for (int t = 0; t < cfg.steps; ++t) {
        const double lr = cfg.lr0 * (1.0 - static_cast<double>(t) / cfg.steps);
        LossResult step;
        try {
            step = infonce_loss(batch_at(t), result.adapters, cfg.loss);
        } catch (const Error& e) {
            if (e.code() == Errc::NonFiniteLoss) {
                fail(Errc::NonFiniteLoss, std::string(e.what()) + " at step " + std::to_string(t));
            }
            throw;
        }
        result.adapters.W_txt -= lr * step.grad_W_txt;
        result.adapters.W_img -= lr * step.grad_W_img;
        result.log.push_back({t, lr, step.loss});
    }
    if (!result.adapters.W_txt.allFinite() || !result.adapters.W_img.allFinite()) {
        fail(Errc::NonFiniteLoss, "final adapter parameters are not finite");
    }
    return result;
}

void write_train_log(const std::vector<TrainStep>& log, const std::filesystem::path& path) {
    std::string body;
    for (const auto& step : log) {
        body += nlohmann::json{{"step", step.step}, {"lr", step.lr}, {"loss", step.loss}}.dump();
        body += '\n';
    }
    write_file(path, body);
}

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    if (rows == 0) return {};
    const Eigen::Index cols = static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != cols) {
            fail(Errc::MalformedRecord, "ragged adapter matrix");
        }
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

}  // namespace

void save_adapters(const AdapterParams& adapters, const LossConfig& cfg, std::uint64_t seed,
                   const std::filesystem::path& path) {
    const nlohmann::json j = {{"format", "adapters-v1"},
                              {"dim", adapters.W_img.rows()},
                              {"temperature", cfg.temperature},
                              {"seed", seed},
                              {"W_img", matrix_to_json(adapters.W_img)},
                              {"W_txt", matrix_to_json(adapters.W_txt)}};
    write_file(path, j.dump() + "\n");
}

AdapterParams load_adapters(const std::filesystem::path& path) {
    const nlohmann::json j = read_json(path);
    try {
        if (j.at("format").get<std::string>() != "adapters-v1") {
            fail(Errc::MalformedRecord, "unknown adapter format tag");
        }
        AdapterParams params;
        params.W_img = matrix_from_json(j.at("W_img"));
        params.W_txt = matrix_from_json(j.at("W_txt"));
        return params;
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("adapters: ") + e.what());
    }
}

}  // namespace pairforge
