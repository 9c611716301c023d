#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pairforge/corpus.hpp"
#include "pairforge/embedkit.hpp"
#include "pairforge/rng.hpp"
#include "pairforge/trainer.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

using namespace pairforge;
using testutil::TempDir;
using testutil::thrown_code;

namespace {

TrainingBatch random_batch(std::uint64_t seed, Eigen::Index dim, Eigen::Index b, Eigen::Index m,
                           bool with_query_negatives) {
    Rng rng(seed);
    TrainingBatch batch;
    batch.queries.resize(dim, b);
    batch.positives.resize(dim, b);
    if (m > 0) batch.hard_negatives.resize(dim, b * m);
    if (with_query_negatives) batch.query_image_negatives.resize(dim, b);
    for (Eigen::Index i = 0; i < b; ++i) {
        batch.queries.col(i) = testutil::random_unit_vector(rng, dim);
        batch.positives.col(i) = testutil::random_unit_vector(rng, dim);
        for (Eigen::Index j = 0; j < m; ++j) {
            batch.hard_negatives.col(i * m + j) = testutil::random_unit_vector(rng, dim);
        }
        if (with_query_negatives) {
            batch.query_image_negatives.col(i) = testutil::random_unit_vector(rng, dim);
        }
    }
    return batch;
}

/// Plain-loop mean of -log softmax(positive | visible candidates), written
/// independently of the production kernel.
double naive_infonce(const TrainingBatch& batch, const AdapterParams& adapters,
                     const LossConfig& cfg) {
    const Eigen::Index b = batch.batch_size();
    const Eigen::Index m = batch.negatives_per_query();
    const bool has_qneg = batch.query_image_negatives.size() > 0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const Eigen::VectorXd q = adapters.W_txt * batch.queries.col(i);
        const auto score = [&](const Eigen::VectorXd& c) {
            return q.dot(adapters.W_img * c) / cfg.temperature;
        };
        std::vector<double> scores{score(batch.positives.col(i))};
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j != i && cfg.include_cross_query_negatives) {
                scores.push_back(score(batch.positives.col(j)));
            }
        }
        for (Eigen::Index c = 0; c < b * m; ++c) {
            if (cfg.include_cross_query_negatives || c / m == i) {
                scores.push_back(score(batch.hard_negatives.col(c)));
            }
        }
        if (has_qneg) scores.push_back(score(batch.query_image_negatives.col(i)));

        double hi = scores[0];
        for (double s : scores) hi = std::max(hi, s);
        double sum = 0.0;
        for (double s : scores) sum += std::exp(s - hi);
        total += hi + std::log(sum) - scores[0];
    }
    return total / static_cast<double>(b);
}

std::vector<TripletRecord> annotated_triplets(const Corpus& corpus, std::size_t count,
                                              int hard_count = 5) {
    std::vector<TripletRecord> out;
    const std::size_t n = corpus.size();
    for (std::size_t i = 0; i < count; ++i) {
        TripletRecord t;
        t.query_id = corpus.item(i % n).item_id;
        t.target_id = corpus.item((i + 1) % n).item_id;
        for (int j = 0; j < hard_count; ++j) {
            t.hard_negative_ids.push_back(corpus.item((i + 2 + static_cast<std::size_t>(j)) % n).item_id);
        }
        t.instructions = {"make it " + std::to_string(i), "turn it into " + std::to_string(i),
                          "replace it with " + std::to_string(i)};
        out.push_back(std::move(t));
    }
    return out;
}

Corpus small_corpus() {
    SyntheticSpec spec;
    spec.seed = 33;
    spec.n_clusters = 6;
    spec.items_per_cluster = 8;
    spec.dims = {{SpaceTag::VisualSemantic, 12},
                 {SpaceTag::VisualPattern, 8},
                 {SpaceTag::CaptionText, 8}};
    spec.intra_cluster_cos = 0.9;
    spec.cross_space_decorrelation = 0.25;
    return generate_synthetic_corpus(spec);
}

}  // namespace

TEST_CASE("infonce: a single unopposed candidate costs exactly zero") {
    TrainingBatch batch;
    batch.queries = Eigen::MatrixXd::Random(6, 1);
    batch.positives = Eigen::MatrixXd::Random(6, 1);
    const LossConfig cfg;
    const LossResult r = infonce_loss(batch, seeded_adapters(6, 2, 0.3), cfg);
    CHECK(r.loss == 0.0);
    CHECK(r.grad_W_img.lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(r.grad_W_txt.lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(grad_check(batch, seeded_adapters(6, 2, 0.3), cfg) <= 1e-8);
}

TEST_CASE("infonce: one negative identical to the positive costs ln 2") {
    TrainingBatch batch;
    Rng rng(5);
    batch.queries = testutil::random_unit_vector(rng, 8);
    batch.positives = testutil::random_unit_vector(rng, 8);
    batch.hard_negatives = batch.positives;
    for (const double tau : {0.02, 0.01}) {
        LossConfig cfg;
        cfg.temperature = tau;
        CAPTURE(tau);
        const LossResult r = infonce_loss(batch, identity_adapters(8), cfg);
        CHECK(std::abs(r.loss - std::log(2.0)) <= 1e-12);
    }
}

TEST_CASE("infonce: matches a plain-loop reimplementation on random batches") {
    int checked = 0;
    for (const bool cross : {true, false}) {
        for (const bool qneg : {true, false}) {
            for (const double tau : {0.02, 0.01}) {
                const TrainingBatch batch =
                    random_batch(11 + static_cast<std::uint64_t>(checked), 8, 4, 3, qneg);
                LossConfig cfg;
                cfg.temperature = tau;
                cfg.include_cross_query_negatives = cross;
                const AdapterParams adapters = seeded_adapters(8, 21, 0.2);
                const double fast = infonce_loss(batch, adapters, cfg).loss;
                const double slow = naive_infonce(batch, adapters, cfg);
                CAPTURE(cross);
                CAPTURE(qneg);
                CAPTURE(tau);
                CHECK(std::abs(fast - slow) <= 1e-12 * std::max(1.0, std::abs(slow)));
                CHECK(fast > 0.0);
                ++checked;
            }
        }
    }
    CHECK(checked == 8);
}

TEST_CASE("infonce: analytic gradients agree with central differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const TrainingBatch batch = random_batch(seed, 6, 3, 2, seed % 2 == 0);
        for (const double tau : {0.02, 0.01}) {
            LossConfig cfg;
            cfg.temperature = tau;
            CAPTURE(seed);
            CAPTURE(tau);
            CHECK(grad_check(batch, seeded_adapters(6, seed, 0.2), cfg) <= 1e-4);
        }
    }
}

TEST_CASE("infonce: adding one vector to every candidate cannot change the loss") {
    Rng rng(9);
    TrainingBatch batch = random_batch(9, 8, 1, 4, false);
    const AdapterParams adapters = seeded_adapters(8, 14, 0.4);
    const LossConfig cfg;
    const double before = infonce_loss(batch, adapters, cfg).loss;

    const Eigen::VectorXd shift = 3.0 * testutil::random_unit_vector(rng, 8);
    batch.positives.colwise() += shift;
    batch.hard_negatives.colwise() += shift;
    const double after = infonce_loss(batch, adapters, cfg).loss;
    CHECK(std::abs(before - after) <= 1e-10 * std::max(1.0, std::abs(before)));
}

TEST_CASE("infonce: reordering the queries reorders nothing that matters") {
    const TrainingBatch batch = random_batch(31, 8, 4, 3, true);
    const std::vector<Eigen::Index> perm{2, 0, 3, 1};
    TrainingBatch shuffled;
    shuffled.queries.resize(8, 4);
    shuffled.positives.resize(8, 4);
    shuffled.hard_negatives.resize(8, 12);
    shuffled.query_image_negatives.resize(8, 4);
    for (Eigen::Index i = 0; i < 4; ++i) {
        shuffled.queries.col(i) = batch.queries.col(perm[static_cast<std::size_t>(i)]);
        shuffled.positives.col(i) = batch.positives.col(perm[static_cast<std::size_t>(i)]);
        shuffled.query_image_negatives.col(i) =
            batch.query_image_negatives.col(perm[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < 3; ++j) {
            shuffled.hard_negatives.col(i * 3 + j) =
                batch.hard_negatives.col(perm[static_cast<std::size_t>(i)] * 3 + j);
        }
    }
    const AdapterParams adapters = seeded_adapters(8, 4, 0.3);
    for (const bool cross : {true, false}) {
        LossConfig cfg;
        cfg.include_cross_query_negatives = cross;
        const double a = infonce_loss(batch, adapters, cfg).loss;
        const double b = infonce_loss(shuffled, adapters, cfg).loss;
        CAPTURE(cross);
        CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)));
    }
}

TEST_CASE("infonce: without cross-query sharing the batch is a mean of single rows") {
    const TrainingBatch batch = random_batch(17, 8, 4, 3, true);
    LossConfig no_cross;
    no_cross.include_cross_query_negatives = false;
    const double whole = infonce_loss(batch, identity_adapters(8), no_cross).loss;

    double mean = 0.0;
    for (Eigen::Index i = 0; i < 4; ++i) {
        TrainingBatch row;
        row.queries = batch.queries.col(i);
        row.positives = batch.positives.col(i);
        row.hard_negatives = batch.hard_negatives.middleCols(i * 3, 3);
        row.query_image_negatives = batch.query_image_negatives.col(i);
        mean += infonce_loss(row, identity_adapters(8), LossConfig{}).loss;
    }
    mean /= 4.0;
    CHECK(std::abs(whole - mean) <= 1e-12 * std::max(1.0, std::abs(whole)));
}

TEST_CASE("infonce: malformed batches and parameters are rejected") {
    TrainingBatch batch = random_batch(3, 6, 2, 2, false);
    const AdapterParams adapters = identity_adapters(6);

    TrainingBatch empty;
    CHECK(thrown_code([&] { infonce_loss(empty, adapters, {}); }) == Errc::InvalidParam);

    LossConfig bad_tau;
    bad_tau.temperature = 0.0;
    CHECK(thrown_code([&] { infonce_loss(batch, adapters, bad_tau); }) == Errc::InvalidParam);

    TrainingBatch ragged = batch;
    ragged.positives = Eigen::MatrixXd::Random(6, 3);
    CHECK(thrown_code([&] { infonce_loss(ragged, adapters, {}); }) == Errc::InvalidParam);

    TrainingBatch nan_batch = batch;
    nan_batch.queries(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK(thrown_code([&] { infonce_loss(nan_batch, adapters, {}); }) == Errc::NonFiniteLoss);
}

TEST_CASE("adapters: identity is exact and the seeded start stays near it") {
    const AdapterParams id = identity_adapters(5);
    CHECK((id.W_img - Eigen::MatrixXd::Identity(5, 5)).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((id.W_txt - Eigen::MatrixXd::Identity(5, 5)).lpNorm<Eigen::Infinity>() == 0.0);

    const AdapterParams a = seeded_adapters(5, 7);
    const AdapterParams b = seeded_adapters(5, 7);
    CHECK((a.W_img - b.W_img).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((a.W_txt - b.W_txt).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((a.W_img - Eigen::MatrixXd::Identity(5, 5)).lpNorm<Eigen::Infinity>() < 0.01);
    CHECK((a.W_img - seeded_adapters(5, 8).W_img).lpNorm<Eigen::Infinity>() > 0.0);
    CHECK((a.W_img - a.W_txt).lpNorm<Eigen::Infinity>() > 0.0);
}

TEST_CASE("batch assembly: profile sets the negative count, partial batches are dropped") {
    const Corpus corpus = small_corpus();
    MockEmbeddingProvider provider(corpus, SpaceTag::VisualSemantic, 3);
    const auto triplets = annotated_triplets(corpus, 9);

    BatchAssembly assembly;
    assembly.batch_size = 4;
    assembly.seed = 5;
    assembly.profile = TrainProfile::MllmStyle;
    auto batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    REQUIRE(batches.size() == 2);  // nine triplets, batch of four, tail dropped
    CHECK(batches[0].batch_size() == 4);
    CHECK(batches[0].negatives_per_query() == 3);
    CHECK(batches[0].query_image_negatives.size() == 0);
    CHECK(batches[0].dim() == corpus.space_dim(SpaceTag::VisualSemantic));

    assembly.profile = TrainProfile::ClipStyle;
    batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    CHECK(batches[0].negatives_per_query() == 4);

    assembly.negatives = NegativeStrategy::None;
    batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    CHECK(batches[0].hard_negatives.size() == 0);
    CHECK(batches[0].query_image_negatives.size() == 0);

    assembly.negatives = NegativeStrategy::QueryImage;
    batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    CHECK(batches[0].hard_negatives.size() == 0);
    REQUIRE(batches[0].query_image_negatives.cols() == 4);
}

TEST_CASE("batch assembly: candidate columns come from the visual-semantic space") {
    const Corpus corpus = small_corpus();
    MockEmbeddingProvider provider(corpus, SpaceTag::VisualSemantic, 3);
    const auto triplets = annotated_triplets(corpus, 4);

    BatchAssembly assembly;
    assembly.batch_size = 4;
    assembly.seed = 2;
    assembly.negatives = NegativeStrategy::QueryImage;
    const auto batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    REQUIRE(batches.size() == 1);

    // Each positive column must be some triplet's target vector; each
    // query-image negative the matching query vector.
    for (Eigen::Index slot = 0; slot < 4; ++slot) {
        bool matched = false;
        for (const auto& t : triplets) {
            const Eigen::VectorXd& target = corpus.vector_of(t.target_id, SpaceTag::VisualSemantic);
            if ((batches[0].positives.col(slot) - target).lpNorm<Eigen::Infinity>() == 0.0) {
                const Eigen::VectorXd& query =
                    corpus.vector_of(t.query_id, SpaceTag::VisualSemantic);
                CHECK((batches[0].query_image_negatives.col(slot) - query)
                          .lpNorm<Eigen::Infinity>() == 0.0);
                matched = true;
                break;
            }
        }
        CHECK(matched);
    }
}

TEST_CASE("batch assembly: epochs reshuffle, replays and picks stay put") {
    const Corpus corpus = small_corpus();
    MockEmbeddingProvider provider(corpus, SpaceTag::VisualSemantic, 3);
    const auto triplets = annotated_triplets(corpus, 12);

    BatchAssembly assembly;
    assembly.batch_size = 12;
    assembly.seed = 8;
    const auto epoch0 = assemble_batches(triplets, corpus, provider, assembly, 0);
    const auto epoch0_again = assemble_batches(triplets, corpus, provider, assembly, 0);
    const auto epoch1 = assemble_batches(triplets, corpus, provider, assembly, 1);
    REQUIRE(epoch0.size() == 1);
    REQUIRE(epoch1.size() == 1);

    CHECK((epoch0[0].queries - epoch0_again[0].queries).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((epoch0[0].positives - epoch0_again[0].positives).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((epoch0[0].hard_negatives - epoch0_again[0].hard_negatives).lpNorm<Eigen::Infinity>() ==
          0.0);
    CHECK((epoch0[0].queries - epoch1[0].queries).lpNorm<Eigen::Infinity>() > 0.0);

    // Per triplet: the query column (instruction pick) and the hard-negative
    // block survive the epoch-1 permutation bit-for-bit.
    const int m = profile_negatives(assembly.profile);
    for (Eigen::Index a = 0; a < 12; ++a) {
        Eigen::Index at = -1;
        for (Eigen::Index b = 0; b < 12; ++b) {
            if ((epoch0[0].positives.col(a) - epoch1[0].positives.col(b))
                    .lpNorm<Eigen::Infinity>() == 0.0 &&
                (epoch0[0].queries.col(a) - epoch1[0].queries.col(b)).lpNorm<Eigen::Infinity>() ==
                    0.0) {
                at = b;
                break;
            }
        }
        REQUIRE(at >= 0);
        CHECK((epoch0[0].hard_negatives.middleCols(a * m, m) -
               epoch1[0].hard_negatives.middleCols(at * m, m))
                  .lpNorm<Eigen::Infinity>() == 0.0);
    }
}

TEST_CASE("batch assembly: broken triplets fail with the specific error") {
    const Corpus corpus = small_corpus();
    MockEmbeddingProvider provider(corpus, SpaceTag::VisualSemantic, 3);
    BatchAssembly assembly;
    assembly.batch_size = 1;

    auto unannotated = annotated_triplets(corpus, 1);
    unannotated[0].instructions.clear();
    CHECK(thrown_code([&] { assemble_batches(unannotated, corpus, provider, assembly, 0); }) ==
          Errc::InvalidParam);

    auto short_negs = annotated_triplets(corpus, 1, 2);
    CHECK(thrown_code([&] { assemble_batches(short_negs, corpus, provider, assembly, 0); }) ==
          Errc::ShortNegatives);

    auto ghost = annotated_triplets(corpus, 1);
    ghost[0].target_id = "item-999999";
    CHECK(thrown_code([&] { assemble_batches(ghost, corpus, provider, assembly, 0); }) ==
          Errc::MissingEmbedding);

    auto ghost_query = annotated_triplets(corpus, 1);
    ghost_query[0].query_id = "item-999999";
    CHECK(thrown_code([&] { assemble_batches(ghost_query, corpus, provider, assembly, 0); }) ==
          Errc::MissingEmbedding);

    assembly.batch_size = 0;
    const auto fine = annotated_triplets(corpus, 1);
    CHECK(thrown_code([&] { assemble_batches(fine, corpus, provider, assembly, 0); }) ==
          Errc::InvalidParam);
}

TEST_CASE("instruction pick: seeded, stable, and inside the list") {
    const Corpus corpus = small_corpus();
    const auto triplets = annotated_triplets(corpus, 2);
    const TripletRecord& t = triplets[0];

    const std::string& pick = pick_instruction(t, 4);
    CHECK(&pick_instruction(t, 4) == &pick);  // same element, not just same text
    CHECK(std::find(t.instructions.begin(), t.instructions.end(), pick) != t.instructions.end());

    std::set<std::string> seen;
    for (std::uint64_t seed = 0; seed < 100; ++seed) seen.insert(pick_instruction(t, seed));
    CHECK(seen.size() == t.instructions.size());  // every candidate reachable

    TripletRecord bare = t;
    bare.instructions.clear();
    CHECK(thrown_code([&] { pick_instruction(bare, 4); }) == Errc::InvalidParam);
}

TEST_CASE("query embedding: profiles build what batches consume") {
    const Corpus corpus = small_corpus();
    MockEmbeddingProvider provider(corpus, SpaceTag::VisualSemantic, 3);
    const auto triplets = annotated_triplets(corpus, 3);
    const TripletRecord& t = triplets[1];

    BatchAssembly assembly;
    assembly.batch_size = 3;
    assembly.seed = 6;

    // mllm profile: the rendered instruction-plus-image-reference template.
    const std::string& instruction = pick_instruction(t, assembly.seed);
    const QueryTemplate tpl =
        QueryTemplate::create(assembly.task_inst, instruction, "img://" + t.query_id);
    const Eigen::VectorXd expected_mllm = mllm_embed(render_query(tpl), provider).values;
    const Eigen::VectorXd got_mllm =
        triplet_query_embedding(t, instruction, corpus, provider, assembly);
    CHECK((expected_mllm - got_mllm).lpNorm<Eigen::Infinity>() == 0.0);

    // clip profile: image vector fused with the embedded instruction text.
    assembly.profile = TrainProfile::ClipStyle;
    const EmbeddingVector image{provider.space(),
                                corpus.vector_of(t.query_id, SpaceTag::VisualSemantic)};
    const Eigen::VectorXd expected_clip =
        fuse(image, mllm_embed(instruction, provider)).values;
    const Eigen::VectorXd got_clip =
        triplet_query_embedding(t, instruction, corpus, provider, assembly);
    CHECK((expected_clip - got_clip).lpNorm<Eigen::Infinity>() == 0.0);

    // Either way the batch column equals the standalone construction.
    assembly.profile = TrainProfile::MllmStyle;
    const auto batches = assemble_batches(triplets, corpus, provider, assembly, 0);
    REQUIRE(batches.size() == 1);
    const Eigen::VectorXd& target = corpus.vector_of(t.target_id, SpaceTag::VisualSemantic);
    bool found = false;
    for (Eigen::Index slot = 0; slot < 3; ++slot) {
        if ((batches[0].positives.col(slot) - target).lpNorm<Eigen::Infinity>() == 0.0) {
            CHECK((batches[0].queries.col(slot) - got_mllm).lpNorm<Eigen::Infinity>() == 0.0);
            found = true;
        }
    }
    CHECK(found);
}

TEST_CASE("training: a zero learning rate learns exactly nothing") {
    const TrainingBatch batch = random_batch(2, 6, 3, 2, false);
    TrainConfig cfg;
    cfg.lr0 = 0.0;
    cfg.steps = 5;
    const AdapterParams init = seeded_adapters(6, 1, 0.1);
    const TrainResult result =
        train(init, [&](int) -> const TrainingBatch& { return batch; }, cfg);
    CHECK((result.adapters.W_img - init.W_img).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((result.adapters.W_txt - init.W_txt).lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE(result.log.size() == 5);
    for (const auto& step : result.log) {
        CHECK(step.lr == 0.0);
        CHECK(step.loss == result.log[0].loss);
    }
}

TEST_CASE("training: descent reduces the loss and the rate decays linearly") {
    const TrainingBatch batch = random_batch(23, 8, 8, 3, false);
    TrainConfig cfg;
    cfg.lr0 = 0.05;
    cfg.steps = 300;
    const TrainResult result = train(identity_adapters(8),
                                     [&](int) -> const TrainingBatch& { return batch; }, cfg);
    REQUIRE(result.log.size() == 300);
    for (int t = 0; t < 300; ++t) {
        CHECK(result.log[static_cast<std::size_t>(t)].lr ==
              cfg.lr0 * (1.0 - static_cast<double>(t) / cfg.steps));
        CHECK(result.log[static_cast<std::size_t>(t)].step == t);
    }
    const auto window = [&](std::size_t from, std::size_t count) {
        double sum = 0.0;
        for (std::size_t i = from; i < from + count; ++i) sum += result.log[i].loss;
        return sum / static_cast<double>(count);
    };
    CHECK(window(250, 50) < 0.5 * window(0, 50));
}

TEST_CASE("training: configuration and mid-run blowups are reported") {
    const TrainingBatch batch = random_batch(2, 4, 2, 1, false);
    TrainConfig cfg;
    cfg.steps = 0;
    CHECK(thrown_code([&] {
              train(identity_adapters(4), [&](int) -> const TrainingBatch& { return batch; }, cfg);
          }) == Errc::InvalidParam);
    cfg.steps = 10;
    cfg.lr0 = -1.0;
    CHECK(thrown_code([&] {
              train(identity_adapters(4), [&](int) -> const TrainingBatch& { return batch; }, cfg);
          }) == Errc::InvalidParam);

    cfg.lr0 = 0.01;
    TrainingBatch poisoned = batch;
    poisoned.queries(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train(identity_adapters(4),
              [&](int t) -> const TrainingBatch& { return t == 3 ? poisoned : batch; }, cfg);
        FAIL("expected NonFiniteLoss");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::NonFiniteLoss);
        CHECK(std::string(e.what()).find("at step 3") != std::string::npos);
    }
}

TEST_CASE("training artifacts: adapters and logs round-trip through files") {
    TempDir tmp;
    const AdapterParams adapters = seeded_adapters(5, 91, 0.7);
    LossConfig cfg;
    cfg.temperature = 0.01;
    save_adapters(adapters, cfg, 42, tmp.path / "adapters.json");
    const AdapterParams back = load_adapters(tmp.path / "adapters.json");
    CHECK((back.W_img - adapters.W_img).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((back.W_txt - adapters.W_txt).lpNorm<Eigen::Infinity>() == 0.0);

    std::ofstream(tmp.path / "junk.json") << "{\"W_img\": [[1, 2], [3]]}";
    CHECK(thrown_code([&] { load_adapters(tmp.path / "junk.json"); }) == Errc::MalformedRecord);

    const std::vector<TrainStep> log{{0, 0.1, 2.5}, {1, 0.05, 1.25}, {2, 0.0, 0.8}};
    write_train_log(log, tmp.path / "train.jsonl");
    std::ifstream in(tmp.path / "train.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.at("step") == static_cast<int>(lines));
        CHECK(j.at("loss").get<double>() == log[lines].loss);
        CHECK(j.at("lr").get<double>() == log[lines].lr);
        ++lines;
    }
    CHECK(lines == 3);
}
