#include "pairforge/pipeline.hpp"

#include "pairforge/embedkit.hpp"
#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_set>

namespace pairforge {

SpaceTag space_from_axis(const std::string& axis) {
    // Single-letter ablation axes next to the long tags.
    if (axis == "D") return SpaceTag::VisualPattern;
    if (axis == "I") return SpaceTag::VisualSemantic;
    if (axis == "T") return SpaceTag::CaptionText;
    if (auto tag = space_from_string(axis)) return *tag;
    fail(Errc::InvalidParam, "unknown space axis '" + axis + "'");
}

NegativeStrategy negatives_from_string(const std::string& name) {
    if (name == "none") return NegativeStrategy::None;
    if (name == "query") return NegativeStrategy::QueryImage;
    if (name == "hard") return NegativeStrategy::Hard;
    fail(Errc::InvalidParam, "unknown negative strategy '" + name + "'");
}

TrainProfile profile_from_string(const std::string& name) {
    if (name == "clip_style") return TrainProfile::ClipStyle;
    if (name == "mllm_style") return TrainProfile::MllmStyle;
    fail(Errc::InvalidParam, "unknown training profile '" + name + "'");
}

namespace {

ProviderEndpoint endpoint_from_json(const nlohmann::json& j) {
    ProviderEndpoint ep;
    ep.kind = j.value("provider", ep.kind);
    if (ep.kind != "mock" && ep.kind != "http") {
        fail(Errc::InvalidParam, "provider must be 'mock' or 'http', got '" + ep.kind + "'");
    }
    ep.host = j.value("host", ep.host);
    ep.port = j.value("port", ep.port);
    ep.timeout_ms = j.value("timeout_ms", ep.timeout_ms);
    return ep;
}

nlohmann::json endpoint_to_json(const ProviderEndpoint& ep) {
    return {{"provider", ep.kind}, {"host", ep.host}, {"port", ep.port},
            {"timeout_ms", ep.timeout_ms}};
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    try {
        if (!j.contains("seed")) fail(Errc::InvalidParam, "config must pin a seed");
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.workers = j.value("workers", cfg.workers);
        cfg.out_dir = std::filesystem::path(j.value("out_dir", std::string()));

        if (j.contains("corpus")) {
            const auto& c = j.at("corpus");
            if (c.contains("synthetic")) {
                const auto& s = c.at("synthetic");
                SyntheticSpec spec;
                spec.n_clusters = s.value("clusters", 0);
                spec.items_per_cluster = s.value("items_per_cluster", 0);
                if (s.contains("dims")) {
                    for (const auto& [name, dim] : s.at("dims").items()) {
                        spec.dims[space_from_axis(name)] = dim.get<int>();
                    }
                }
                spec.intra_cluster_cos = s.value("intra_cluster_cos", spec.intra_cluster_cos);
                spec.cross_space_decorrelation =
                    s.value("decorrelation", spec.cross_space_decorrelation);
                cfg.corpus.synthetic = spec;
            }
            if (c.contains("manifest")) {
                cfg.corpus.manifest_path = c.at("manifest").get<std::string>();
            }
            if (c.contains("records")) cfg.corpus.records_path = c.at("records").get<std::string>();
        }

        if (j.contains("index")) {
            const auto& ix = j.at("index");
            const std::string kind = ix.value("kind", "exact");
            if (kind == "exact") {
                cfg.index_kind = IndexKind::Exact;
            } else if (kind == "approx_graph") {
                cfg.index_kind = IndexKind::ApproxGraph;
            } else {
                fail(Errc::InvalidParam, "unknown index kind '" + kind + "'");
            }
            cfg.approx.max_degree = ix.value("max_degree", cfg.approx.max_degree);
            cfg.approx.ef_construction = ix.value("ef_construction", cfg.approx.ef_construction);
            cfg.approx.ef_search = ix.value("ef_search", cfg.approx.ef_search);
        }

        if (j.contains("mining")) {
            const auto& m = j.at("mining");
            cfg.mining.k = m.value("k", cfg.mining.k);
            cfg.mining.per_query_cap = m.value("per_query_cap", cfg.mining.per_query_cap);
            cfg.mining.query_sample_rate =
                m.value("query_sample_rate", cfg.mining.query_sample_rate);
            if (m.contains("spaces")) {
                cfg.mining.spaces.clear();
                for (const auto& s : m.at("spaces")) {
                    cfg.mining.spaces.push_back(space_from_axis(s.get<std::string>()));
                }
            }
            if (m.contains("bands")) {
                for (const auto& [name, arr] : m.at("bands").items()) {
                    cfg.mining.bands[space_from_axis(name)] =
                        SimilarityBand{arr.at(0).get<double>(), arr.at(1).get<double>()};
                }
            }
            cfg.shard_size = m.value("shard_size", cfg.shard_size);
        }

        if (j.contains("annotate")) {
            const auto& a = j.at("annotate");
            cfg.annotate.provider = endpoint_from_json(a);
            if (a.contains("demo_pool")) {
                cfg.annotate.demo_pool_path = a.at("demo_pool").get<std::string>();
            }
            cfg.annotate.max_retries = a.value("max_retries", cfg.annotate.max_retries);
            cfg.annotate.backoff_ms = a.value("backoff_ms", cfg.annotate.backoff_ms);
            cfg.annotate.max_inflight = a.value("max_inflight", cfg.annotate.max_inflight);
        }

        if (j.contains("train")) {
            const auto& t = j.at("train");
            cfg.train.profile = profile_from_string(
                t.value("profile", std::string(to_string(cfg.train.profile))));
            cfg.train.negatives = negatives_from_string(
                t.value("negatives", std::string(to_string(cfg.train.negatives))));
            cfg.train.temperature = t.value("temperature", cfg.train.temperature);
            cfg.train.lr0 = t.value("lr0", cfg.train.lr0);
            cfg.train.steps = t.value("steps", cfg.train.steps);
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            cfg.train.include_cross_query_negatives = t.value(
                "include_cross_query_negatives", cfg.train.include_cross_query_negatives);
            cfg.train.adapter_noise = t.value("adapter_noise", cfg.train.adapter_noise);
            cfg.train.task_inst = t.value("task_inst", cfg.train.task_inst);
            cfg.train.max_triplets = t.value("max_triplets", cfg.train.max_triplets);
            if (t.contains("embedder")) cfg.train.embedder = endpoint_from_json(t.at("embedder"));
        }

        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("ks")) cfg.eval.ks = e.at("ks").get<std::vector<int>>();
            cfg.eval.holdout_queries = e.value("holdout_queries", cfg.eval.holdout_queries);
            if (e.contains("task_dir")) cfg.eval.task_dir = e.at("task_dir").get<std::string>();
        }

        if (j.contains("ablate")) {
            const auto& a = j.at("ablate");
            cfg.ablate.budget = a.value("budget", cfg.ablate.budget);
            if (a.contains("cells")) {
                for (const auto& c : a.at("cells")) {
                    AblationCell cell;
                    if (c.contains("spaces")) {
                        for (const auto& s : c.at("spaces")) {
                            cell.spaces.push_back(space_from_axis(s.get<std::string>()));
                        }
                    }
                    cell.negatives = negatives_from_string(c.value("negatives", "hard"));
                    cfg.ablate.cells.push_back(std::move(cell));
                }
            }
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("config: ") + e.what());
    }
    return cfg;
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j{{"seed", cfg.seed},
                     {"workers", cfg.workers},
                     {"out_dir", cfg.out_dir.generic_string()}};

    nlohmann::json corpus = nlohmann::json::object();
    if (cfg.corpus.synthetic) {
        const SyntheticSpec& s = *cfg.corpus.synthetic;
        nlohmann::json dims = nlohmann::json::object();
        for (const auto& [tag, dim] : s.dims) dims[std::string(to_string(tag))] = dim;
        corpus["synthetic"] = {{"clusters", s.n_clusters},
                               {"items_per_cluster", s.items_per_cluster},
                               {"dims", std::move(dims)},
                               {"intra_cluster_cos", s.intra_cluster_cos},
                               {"decorrelation", s.cross_space_decorrelation}};
    }
    if (!cfg.corpus.manifest_path.empty()) {
        corpus["manifest"] = cfg.corpus.manifest_path.generic_string();
    }
    if (!cfg.corpus.records_path.empty()) {
        corpus["records"] = cfg.corpus.records_path.generic_string();
    }
    j["corpus"] = std::move(corpus);

    j["index"] = {{"kind", cfg.index_kind == IndexKind::Exact ? "exact" : "approx_graph"},
                  {"max_degree", cfg.approx.max_degree},
                  {"ef_construction", cfg.approx.ef_construction},
                  {"ef_search", cfg.approx.ef_search}};

    nlohmann::json spaces = nlohmann::json::array();
    for (SpaceTag tag : cfg.mining.spaces) spaces.push_back(std::string(to_string(tag)));
    nlohmann::json bands = nlohmann::json::object();
    for (const auto& [tag, band] : cfg.mining.bands) {
        bands[std::string(to_string(tag))] = {band.lo, band.hi};
    }
    j["mining"] = {{"k", cfg.mining.k},
                   {"per_query_cap", cfg.mining.per_query_cap},
                   {"query_sample_rate", cfg.mining.query_sample_rate},
                   {"spaces", std::move(spaces)},
                   {"bands", std::move(bands)},
                   {"shard_size", cfg.shard_size}};

    nlohmann::json annotate = endpoint_to_json(cfg.annotate.provider);
    if (!cfg.annotate.demo_pool_path.empty()) {
        annotate["demo_pool"] = cfg.annotate.demo_pool_path.generic_string();
    }
    annotate["max_retries"] = cfg.annotate.max_retries;
    annotate["backoff_ms"] = cfg.annotate.backoff_ms;
    annotate["max_inflight"] = cfg.annotate.max_inflight;
    j["annotate"] = std::move(annotate);

    j["train"] = {{"profile", std::string(to_string(cfg.train.profile))},
                  {"negatives", std::string(to_string(cfg.train.negatives))},
                  {"temperature", cfg.train.temperature},
                  {"lr0", cfg.train.lr0},
                  {"steps", cfg.train.steps},
                  {"batch_size", cfg.train.batch_size},
                  {"include_cross_query_negatives", cfg.train.include_cross_query_negatives},
                  {"adapter_noise", cfg.train.adapter_noise},
                  {"task_inst", cfg.train.task_inst},
                  {"max_triplets", cfg.train.max_triplets},
                  {"embedder", endpoint_to_json(cfg.train.embedder)}};

    nlohmann::json eval{{"ks", cfg.eval.ks}, {"holdout_queries", cfg.eval.holdout_queries}};
    if (!cfg.eval.task_dir.empty()) eval["task_dir"] = cfg.eval.task_dir.generic_string();
    j["eval"] = std::move(eval);

    nlohmann::json cells = nlohmann::json::array();
    for (const AblationCell& cell : cfg.ablate.cells) {
        nlohmann::json cs = nlohmann::json::array();
        for (SpaceTag tag : cell.spaces) cs.push_back(std::string(to_string(tag)));
        cells.push_back({{"spaces", std::move(cs)},
                         {"negatives", std::string(to_string(cell.negatives))}});
    }
    j["ablate"] = {{"budget", cfg.ablate.budget}, {"cells", std::move(cells)}};
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    return run_config_from_json(read_json(path));
}

void validate_config(const RunConfig& cfg) {
    if (cfg.workers < 1) fail(Errc::InvalidParam, "workers must be >= 1");
    if (cfg.out_dir.empty()) fail(Errc::InvalidParam, "out_dir is required");

    const bool synth = cfg.corpus.synthetic.has_value();
    const bool paths = !cfg.corpus.manifest_path.empty() || !cfg.corpus.records_path.empty();
    if (synth == paths) {
        fail(Errc::InvalidParam,
             "configure exactly one corpus source: synthetic or manifest+records");
    }
    if (paths) {
        if (cfg.corpus.manifest_path.empty() || cfg.corpus.records_path.empty()) {
            fail(Errc::InvalidParam, "corpus needs both manifest and records paths");
        }
        for (const auto& p : {cfg.corpus.manifest_path, cfg.corpus.records_path}) {
            if (!std::filesystem::exists(p)) {
                fail(Errc::InvalidParam, "referenced path does not exist: " + p.string());
            }
        }
    }
    if (synth) {
        const SyntheticSpec& s = *cfg.corpus.synthetic;
        if (s.n_clusters < 1 || s.items_per_cluster < 1) {
            fail(Errc::InvalidParam, "synthetic corpus needs clusters and items_per_cluster");
        }
    }

    for (const auto& [tag, band] : cfg.mining.bands) {
        if (!band.valid()) {
            fail(Errc::InvalidParam,
                 "band for " + std::string(to_string(tag)) + " must satisfy lo < hi");
        }
    }
    if (cfg.mining.k < 6) fail(Errc::InvalidParam, "mining k must be >= 6");
    if (cfg.mining.per_query_cap < 1) fail(Errc::InvalidParam, "per_query_cap must be >= 1");
    if (cfg.mining.query_sample_rate < 0.0 || cfg.mining.query_sample_rate > 1.0) {
        fail(Errc::InvalidParam, "query_sample_rate must lie in [0, 1]");
    }
    if (cfg.mining.spaces.empty()) fail(Errc::InvalidParam, "mining needs at least one space");
    if (cfg.shard_size < 1) fail(Errc::InvalidParam, "shard_size must be >= 1");

    if (cfg.index_kind == IndexKind::ApproxGraph) {
        if (cfg.approx.max_degree < 2) fail(Errc::InvalidParam, "max_degree must be >= 2");
        if (cfg.approx.ef_construction < 1 || cfg.approx.ef_search < 1) {
            fail(Errc::InvalidParam, "ef parameters must be >= 1");
        }
    }

    if (cfg.annotate.max_retries < 0) fail(Errc::InvalidParam, "max_retries must be >= 0");
    if (cfg.annotate.backoff_ms < 0) fail(Errc::InvalidParam, "backoff_ms must be >= 0");
    if (cfg.annotate.max_inflight < 1) fail(Errc::InvalidParam, "max_inflight must be >= 1");
    if (!cfg.annotate.demo_pool_path.empty() &&
        !std::filesystem::exists(cfg.annotate.demo_pool_path)) {
        fail(Errc::InvalidParam,
             "referenced path does not exist: " + cfg.annotate.demo_pool_path.string());
    }

    if (!(cfg.train.temperature > 0.0)) fail(Errc::InvalidParam, "temperature must be positive");
    if (cfg.train.lr0 < 0.0) fail(Errc::InvalidParam, "lr0 must be >= 0");
    if (cfg.train.steps < 1) fail(Errc::InvalidParam, "steps must be >= 1");
    if (cfg.train.batch_size < 1) fail(Errc::InvalidParam, "batch_size must be >= 1");
    if (cfg.train.adapter_noise < 0.0) fail(Errc::InvalidParam, "adapter_noise must be >= 0");

    if (cfg.eval.ks.empty()) fail(Errc::InvalidParam, "eval needs at least one k");
    for (int k : cfg.eval.ks) {
        if (k < 1) fail(Errc::InvalidParam, "eval ks must be >= 1");
    }
    if (cfg.eval.holdout_queries < 1) fail(Errc::InvalidParam, "holdout_queries must be >= 1");
    if (!cfg.eval.task_dir.empty() && !std::filesystem::exists(cfg.eval.task_dir)) {
        fail(Errc::InvalidParam,
             "referenced path does not exist: " + cfg.eval.task_dir.string());
    }

    if (cfg.ablate.budget < 1) fail(Errc::InvalidParam, "ablation budget must be >= 1");
}

namespace {

std::filesystem::path corpus_manifest_path(const RunConfig& cfg) {
    return cfg.out_dir / "corpus" / "manifest.json";
}

std::filesystem::path corpus_records_path(const RunConfig& cfg) {
    return cfg.out_dir / "corpus" / "records.jsonl";
}

Corpus load_run_corpus(const RunConfig& cfg) {
    return ingest_corpus(corpus_manifest_path(cfg), corpus_records_path(cfg));
}

/// Spaces the run needs indexed: mining spaces, the candidate space the
/// holdout is mined in, and every ablation-cell space.
std::vector<SpaceTag> run_spaces(const RunConfig& cfg) {
    std::vector<SpaceTag> spaces = cfg.mining.spaces;
    const auto add = [&](SpaceTag tag) {
        if (std::find(spaces.begin(), spaces.end(), tag) == spaces.end()) spaces.push_back(tag);
    };
    add(SpaceTag::VisualSemantic);
    for (const AblationCell& cell : cfg.ablate.cells) {
        for (SpaceTag tag : cell.spaces) add(tag);
    }
    return spaces;
}

std::filesystem::path index_path(const RunConfig& cfg, SpaceTag tag) {
    return cfg.out_dir / "index" / (std::string(to_string(tag)) + ".json");
}

struct LoadedIndices {
    std::vector<std::unique_ptr<SimIndex>> owned;
    std::map<SpaceTag, const SimIndex*> by_space;
};

LoadedIndices load_run_indices(const RunConfig& cfg, const Corpus& corpus) {
    LoadedIndices out;
    for (SpaceTag tag : run_spaces(cfg)) {
        out.owned.push_back(load_index(corpus, index_path(cfg, tag)));
        out.by_space[tag] = out.owned.back().get();
    }
    return out;
}

std::string unordered_key(const MinedPair& pair) {
    const std::string& a = std::min(pair.query_id, pair.target_id);
    const std::string& b = std::max(pair.query_id, pair.target_id);
    return a + '\x1f' + b;
}

constexpr int kHardNegatives = 5;

TripletRecord to_triplet(const RunConfig& cfg, const Corpus& corpus, const MinedPair& pair) {
    TripletProvenance provenance;
    provenance.corpus_id = corpus.manifest().corpus_id;
    provenance.band = cfg.mining.band_for(pair.space);
    provenance.seed = cfg.seed;
    return attach_hard_negatives(pair, kHardNegatives, cfg.seed, provenance);
}

/// Held-out pairs for evaluation: mined in the candidate space under a
/// separate seed stream, one target per query, then a seeded pick of
/// holdout_queries of them (kept in mining order). Queries stay unique, so
/// no eval item carries two embeddings.
std::vector<TripletRecord> mine_holdout(const RunConfig& cfg, const Corpus& corpus,
                                        const std::map<SpaceTag, const SimIndex*>& indices) {
    MiningParams mp = cfg.mining;
    mp.spaces = {SpaceTag::VisualSemantic};
    mp.per_query_cap = 1;
    mp.query_sample_rate = 1.0;
    mp.seed = derive_seed(cfg.seed, "holdout");
    mp.workers = cfg.workers;
    std::vector<MinedPair> pool = dedup_pairs(mine_pairs(corpus, indices, mp));
    if (pool.empty()) {
        fail(Errc::InvalidParam, "no band survivors to hold out; widen the band or the corpus");
    }
    const std::size_t want =
        std::min(pool.size(), static_cast<std::size_t>(cfg.eval.holdout_queries));
    Rng rng(derive_seed(cfg.seed, "holdout-pick"));
    std::vector<std::size_t> picks = rng.sample_without_replacement(pool.size(), want);
    std::sort(picks.begin(), picks.end());
    std::vector<TripletRecord> records;
    records.reserve(picks.size());
    for (std::size_t i : picks) records.push_back(to_triplet(cfg, corpus, pool[i]));
    return records;
}

std::filesystem::path holdout_pairs_path(const RunConfig& cfg) {
    return cfg.out_dir / "eval" / "pairs.jsonl";
}

std::filesystem::path holdout_annotated_path(const RunConfig& cfg) {
    return cfg.out_dir / "eval" / "annotated.jsonl";
}

void write_triplet_file(const std::vector<TripletRecord>& records,
                        const std::filesystem::path& path) {
    std::string lines;
    for (const TripletRecord& r : records) {
        lines += triplet_to_json(r).dump();
        lines += '\n';
    }
    write_file(path, lines);
}

std::unordered_set<std::string> holdout_keys(const std::vector<TripletRecord>& records) {
    std::unordered_set<std::string> keys;
    keys.reserve(records.size());
    for (const TripletRecord& r : records) {
        MinedPair p;
        p.query_id = r.query_id;
        p.target_id = r.target_id;
        keys.insert(unordered_key(p));
    }
    return keys;
}

/// Drops training pairs that collide with a held-out pair key.
std::size_t exclude_holdout(std::vector<MinedPair>& pairs,
                            const std::unordered_set<std::string>& keys) {
    const std::size_t before = pairs.size();
    pairs.erase(std::remove_if(pairs.begin(), pairs.end(),
                               [&](const MinedPair& p) { return keys.count(unordered_key(p)); }),
                pairs.end());
    return before - pairs.size();
}

AnnotateOptions annotate_options(const RunConfig& cfg) {
    AnnotateOptions options;
    options.seed = cfg.seed;
    options.max_retries = cfg.annotate.max_retries;
    options.backoff_ms = cfg.annotate.backoff_ms;
    options.max_inflight = std::clamp(cfg.annotate.max_inflight, 1, std::max(1, cfg.workers));
    return options;
}

std::vector<Demo> run_demo_pool(const RunConfig& cfg) {
    return cfg.annotate.demo_pool_path.empty() ? builtin_demo_pool()
                                               : demo_pool_from_file(cfg.annotate.demo_pool_path);
}

BatchAssembly run_assembly(const RunConfig& cfg, NegativeStrategy negatives) {
    BatchAssembly assembly;
    assembly.profile = cfg.train.profile;
    assembly.negatives = negatives;
    assembly.batch_size = cfg.train.batch_size;
    assembly.seed = cfg.seed;
    assembly.task_inst = cfg.train.task_inst;
    return assembly;
}

LossConfig run_loss(const RunConfig& cfg) {
    return {cfg.train.temperature, cfg.train.include_cross_query_negatives};
}

TrainResult train_on_records(const RunConfig& cfg, const Corpus& corpus,
                             const std::vector<TripletRecord>& records,
                             EmbeddingProvider& provider, NegativeStrategy negatives) {
    const BatchAssembly assembly = run_assembly(cfg, negatives);
    std::vector<TrainingBatch> epoch = assemble_batches(records, corpus, provider, assembly, 0);
    if (epoch.empty()) {
        fail(Errc::InvalidParam, "only " + std::to_string(records.size()) +
                                     " triplets: not enough for one batch of " +
                                     std::to_string(cfg.train.batch_size));
    }
    const int per_epoch = static_cast<int>(epoch.size());
    int cached_epoch = 0;

    TrainConfig tc;
    tc.lr0 = cfg.train.lr0;
    tc.steps = cfg.train.steps;
    tc.loss = run_loss(cfg);

    AdapterParams init = seeded_adapters(corpus.space_dim(SpaceTag::VisualSemantic), cfg.seed,
                                         cfg.train.adapter_noise);
    const auto batch_at = [&](int t) -> const TrainingBatch& {
        const int e = t / per_epoch;
        if (e != cached_epoch) {
            epoch = assemble_batches(records, corpus, provider, assembly, e);
            cached_epoch = e;
        }
        return epoch[static_cast<std::size_t>(t % per_epoch)];
    };
    return train(std::move(init), batch_at, tc);
}

double primary_metric(const MetricReport& report, const std::vector<int>& ks) {
    const int k = *std::min_element(ks.begin(), ks.end());
    if (report.subset_recall_at.count(k)) return report.subset_recall_at.at(k);
    if (report.recall_at.count(k)) return report.recall_at.at(k);
    return 0.0;
}

std::string strip_code(const Error& e) {
    const std::string prefix = std::string(to_string(e.code())) + ": ";
    const std::string what = e.what();
    return what.rfind(prefix, 0) == 0 ? what.substr(prefix.size()) : what;
}

}  // namespace

void stage_corpus(const RunConfig& cfg) {
    Corpus corpus = [&] {
        if (cfg.corpus.synthetic) {
            SyntheticSpec spec = *cfg.corpus.synthetic;
            spec.seed = cfg.seed;
            return generate_synthetic_corpus(spec);
        }
        return ingest_corpus(cfg.corpus.manifest_path, cfg.corpus.records_path);
    }();
    emit_corpus(corpus, corpus_manifest_path(cfg), corpus_records_path(cfg));
}

void stage_index(const RunConfig& cfg) {
    const Corpus corpus = load_run_corpus(cfg);
    for (SpaceTag tag : run_spaces(cfg)) {
        const auto index = build_index(corpus, tag, cfg.index_kind, cfg.approx);
        save_index(*index, index_path(cfg, tag));
    }
}

void stage_mine(const RunConfig& cfg) {
    const Corpus corpus = load_run_corpus(cfg);
    const LoadedIndices indices = load_run_indices(cfg, corpus);

    const std::vector<TripletRecord> holdout = mine_holdout(cfg, corpus, indices.by_space);
    write_triplet_file(holdout, holdout_pairs_path(cfg));

    MiningParams mp = cfg.mining;
    mp.seed = cfg.seed;
    mp.workers = cfg.workers;
    MiningReport report;
    std::vector<MinedPair> pairs = dedup_pairs(mine_pairs(corpus, indices.by_space, mp, &report),
                                               &report);
    const std::size_t excluded = exclude_holdout(pairs, holdout_keys(holdout));

    std::vector<TripletRecord> records;
    records.reserve(pairs.size());
    for (const MinedPair& pair : pairs) records.push_back(to_triplet(cfg, corpus, pair));
    write_triplet_shards(records, cfg.out_dir / "mined", cfg.shard_size);

    nlohmann::json summary = report_to_json(report);
    summary["pairs"] = records.size();
    summary["holdout_pairs"] = holdout.size();
    summary["holdout_excluded"] = excluded;
    write_file(cfg.out_dir / "mined" / "report.json", summary.dump(2) + "\n");
}

std::unique_ptr<AnnotationProvider> make_annotation_provider(const RunConfig& cfg) {
    const ProviderEndpoint& ep = cfg.annotate.provider;
    if (ep.kind == "mock") {
        return std::make_unique<MockAnnotationProvider>(derive_seed(cfg.seed, "annotator"));
    }
    if (ep.host.empty() || ep.port <= 0) {
        fail(Errc::ProviderUnavailable, "no annotation endpoint configured");
    }
    return std::make_unique<HttpAnnotationProvider>(ep.host, ep.port, ep.timeout_ms);
}

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const RunConfig& cfg,
                                                           const Corpus& corpus) {
    const ProviderEndpoint& ep = cfg.train.embedder;
    if (ep.kind == "mock") {
        return std::make_unique<MockEmbeddingProvider>(corpus, SpaceTag::VisualSemantic,
                                                       derive_seed(cfg.seed, "embedder"));
    }
    if (ep.host.empty() || ep.port <= 0) {
        fail(Errc::ProviderUnavailable, "no embedding endpoint configured");
    }
    return std::make_unique<HttpEmbeddingProvider>(ep.host, ep.port, SpaceTag::VisualSemantic,
                                                   ep.timeout_ms);
}

void stage_annotate(const RunConfig& cfg) {
    const Corpus corpus = load_run_corpus(cfg);
    std::vector<TripletRecord> records = read_triplet_dir(cfg.out_dir / "mined");
    std::vector<TripletRecord> holdout = read_triplet_shards({holdout_pairs_path(cfg)});

    const std::unique_ptr<AnnotationProvider> provider = make_annotation_provider(cfg);
    const std::vector<Demo> pool = run_demo_pool(cfg);
    const AnnotateOptions options = annotate_options(cfg);

    const AnnotateStats stats = annotate_records(records, corpus, *provider, pool, options);
    const AnnotateStats holdout_stats =
        annotate_records(holdout, corpus, *provider, pool, options);

    write_triplet_shards(records, cfg.out_dir / "annotated", cfg.shard_size);
    write_triplet_file(holdout, holdout_annotated_path(cfg));

    const nlohmann::json summary = {{"annotated", stats.annotated},
                                    {"retries", stats.retries},
                                    {"reasks", stats.reasks},
                                    {"holdout_annotated", holdout_stats.annotated},
                                    {"holdout_retries", holdout_stats.retries},
                                    {"holdout_reasks", holdout_stats.reasks}};
    write_file(cfg.out_dir / "annotated" / "stats.json", summary.dump(2) + "\n");
}

void stage_train(const RunConfig& cfg) {
    const Corpus corpus = load_run_corpus(cfg);
    std::vector<TripletRecord> records = read_triplet_dir(cfg.out_dir / "annotated");
    if (cfg.train.max_triplets > 0 && records.size() > cfg.train.max_triplets) {
        records.resize(cfg.train.max_triplets);
    }
    const std::unique_ptr<EmbeddingProvider> provider = make_embedding_provider(cfg, corpus);
    const TrainResult result =
        train_on_records(cfg, corpus, records, *provider, cfg.train.negatives);
    save_adapters(result.adapters, run_loss(cfg), cfg.seed, cfg.out_dir / "train" / "adapters.json");
    write_train_log(result.log, cfg.out_dir / "train" / "log.jsonl");
}

EvalTask holdout_eval_task(const RunConfig& cfg, const Corpus& corpus,
                           const std::vector<TripletRecord>& eval_records,
                           EmbeddingProvider& provider, const AdapterParams& adapters) {
    const BatchAssembly assembly = run_assembly(cfg, cfg.train.negatives);

    EvalTask task;
    task.protocol = EvalProtocol::SubsetOnly;
    std::vector<std::string> all_ids;
    all_ids.reserve(corpus.size());
    for (const CorpusItem& item : corpus.items()) {
        task.pool[item.item_id] =
            adapters.W_img * item.embeddings.at(SpaceTag::VisualSemantic);
        all_ids.push_back(item.item_id);
    }
    std::sort(all_ids.begin(), all_ids.end());

    for (const TripletRecord& rec : eval_records) {
        EvalQuery query;
        query.query_id = rec.query_id;
        const std::string& instruction = pick_instruction(rec, cfg.seed);
        query.embedding =
            adapters.W_txt * triplet_query_embedding(rec, instruction, corpus, provider, assembly);
        query.ground_truth = {rec.target_id};
        std::vector<std::string> subset;
        subset.reserve(all_ids.size() - 1);
        for (const std::string& id : all_ids) {
            if (id != rec.query_id) subset.push_back(id);
        }
        query.subset_ids = std::move(subset);
        task.queries.push_back(std::move(query));
    }
    return task;
}

MetricReport stage_eval(const RunConfig& cfg) {
    const Corpus corpus = load_run_corpus(cfg);
    const AdapterParams adapters = load_adapters(cfg.out_dir / "train" / "adapters.json");

    MetricReport report;
    if (!cfg.eval.task_dir.empty()) {
        // Saved tasks hold raw provider-space vectors; adapt both sides here.
        EvalTask task = load_eval_task(cfg.eval.task_dir);
        for (auto& [id, v] : task.pool) v = adapters.W_img * v;
        for (EvalQuery& q : task.queries) q.embedding = adapters.W_txt * q.embedding;
        report = run_protocol(task, cfg.eval.ks);
    } else {
        const std::vector<TripletRecord> eval_records =
            read_triplet_shards({holdout_annotated_path(cfg)});
        const std::unique_ptr<EmbeddingProvider> provider =
            make_embedding_provider(cfg, corpus);
        const EvalTask task = holdout_eval_task(cfg, corpus, eval_records, *provider, adapters);
        report = run_protocol(task, cfg.eval.ks);
    }
    write_file(cfg.out_dir / "eval" / "report.json",
               metric_report_to_json(report).dump(2) + "\n");
    write_file(cfg.out_dir / "eval" / "table.txt", render_metric_table(report));
    return report;
}

MetricReport run_pipeline(const RunConfig& cfg) {
    validate_config(cfg);
    const auto guard = [](const char* name, auto&& fn) -> decltype(fn()) {
        try {
            return fn();
        } catch (const Error& e) {
            throw Error(e.code(), std::string("stage ") + name + ": " + strip_code(e));
        }
    };
    guard("corpus", [&] { stage_corpus(cfg); });
    guard("index", [&] { stage_index(cfg); });
    guard("mine", [&] { stage_mine(cfg); });
    guard("annotate", [&] { stage_annotate(cfg); });
    guard("train", [&] { stage_train(cfg); });
    MetricReport report = guard("eval", [&] { return stage_eval(cfg); });
    write_run_manifest(cfg);
    return report;
}

namespace {

std::string cell_label(const AblationCell& cell) {
    std::string label;
    for (SpaceTag tag : cell.spaces) {
        if (!label.empty()) label += '+';
        label += std::string(to_string(tag));
    }
    if (label.empty()) label = "(none)";
    label += '-';
    label += std::string(to_string(cell.negatives));
    return label;
}

std::string render_ablation_table(const AblationOutcome& outcome, int primary_k) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-28s %10s %10s %10s\n", "cell", "pairs", "used",
                  ("R@" + std::to_string(primary_k)).c_str());
    out << line;
    std::vector<const CellOutcome*> ok;
    for (const CellOutcome& cell : outcome.cells) {
        if (!cell.error.empty()) {
            std::snprintf(line, sizeof(line), "%-28s failed: %s\n", cell.label.c_str(),
                          cell.error.c_str());
            out << line;
            continue;
        }
        const double r1 = cell.report.subset_recall_at.count(primary_k)
                              ? cell.report.subset_recall_at.at(primary_k)
                              : 0.0;
        std::snprintf(line, sizeof(line), "%-28s %10zu %10zu %10.4f\n", cell.label.c_str(),
                      cell.distinct_pairs, cell.used_triplets, r1);
        out << line;
        ok.push_back(&cell);
    }
    if (ok.size() > 1) {
        out << "orderings:\n";
        const auto metric = [&](const CellOutcome& c) {
            return c.report.subset_recall_at.count(primary_k)
                       ? c.report.subset_recall_at.at(primary_k)
                       : 0.0;
        };
        for (std::size_t i = 0; i < ok.size(); ++i) {
            for (std::size_t j = i + 1; j < ok.size(); ++j) {
                const CellOutcome* hi = ok[i];
                const CellOutcome* lo = ok[j];
                if (metric(*hi) < metric(*lo)) std::swap(hi, lo);
                std::snprintf(line, sizeof(line), "  %s >= %s  (%.4f vs %.4f, delta %+.4f)\n",
                              hi->label.c_str(), lo->label.c_str(), metric(*hi), metric(*lo),
                              metric(*hi) - metric(*lo));
                out << line;
            }
        }
    }
    return out.str();
}

}  // namespace

AblationOutcome run_ablation(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.ablate.cells.empty()) fail(Errc::InvalidParam, "no ablation cells configured");

    stage_corpus(cfg);
    stage_index(cfg);
    const Corpus corpus = load_run_corpus(cfg);
    const LoadedIndices indices = load_run_indices(cfg, corpus);

    // One held-out task shared by every cell, annotated once.
    std::vector<TripletRecord> holdout = mine_holdout(cfg, corpus, indices.by_space);
    write_triplet_file(holdout, holdout_pairs_path(cfg));
    const std::unique_ptr<AnnotationProvider> annotator = make_annotation_provider(cfg);
    const std::vector<Demo> pool = run_demo_pool(cfg);
    const AnnotateOptions options = annotate_options(cfg);
    annotate_records(holdout, corpus, *annotator, pool, options);
    write_triplet_file(holdout, holdout_annotated_path(cfg));
    const std::unordered_set<std::string> excluded_keys = holdout_keys(holdout);

    const std::unique_ptr<EmbeddingProvider> embedder = make_embedding_provider(cfg, corpus);

    AblationOutcome outcome;
    for (std::size_t ci = 0; ci < cfg.ablate.cells.size(); ++ci) {
        const AblationCell& cell = cfg.ablate.cells[ci];
        CellOutcome oc;
        oc.label = cell_label(cell);
        oc.spaces = cell.spaces;
        oc.negatives = cell.negatives;
        try {
            if (cell.spaces.empty()) fail(Errc::InvalidParam, "empty space subset");
            char dir_name[48];
            std::snprintf(dir_name, sizeof(dir_name), "cell-%02zu-%s", ci, oc.label.c_str());
            const std::filesystem::path cell_dir = cfg.out_dir / "ablate" / dir_name;

            MiningParams mp = cfg.mining;
            mp.spaces = cell.spaces;
            mp.seed = cfg.seed;
            mp.workers = cfg.workers;
            std::vector<MinedPair> pairs = dedup_pairs(mine_pairs(corpus, indices.by_space, mp));
            oc.distinct_pairs = pairs.size();
            exclude_holdout(pairs, excluded_keys);
            if (pairs.size() > cfg.ablate.budget) pairs.resize(cfg.ablate.budget);

            std::vector<TripletRecord> records;
            records.reserve(pairs.size());
            for (const MinedPair& pair : pairs) records.push_back(to_triplet(cfg, corpus, pair));
            annotate_records(records, corpus, *annotator, pool, options);
            oc.used_triplets = records.size();
            write_triplet_shards(records, cell_dir / "annotated", cfg.shard_size);

            const TrainResult trained =
                train_on_records(cfg, corpus, records, *embedder, cell.negatives);
            save_adapters(trained.adapters, run_loss(cfg), cfg.seed,
                          cell_dir / "train" / "adapters.json");
            write_train_log(trained.log, cell_dir / "train" / "log.jsonl");

            const EvalTask task =
                holdout_eval_task(cfg, corpus, holdout, *embedder, trained.adapters);
            oc.report = run_protocol(task, cfg.eval.ks);
            write_file(cell_dir / "eval" / "report.json",
                       metric_report_to_json(oc.report).dump(2) + "\n");
        } catch (const std::exception& e) {
            oc.error = e.what();
        }
        outcome.cells.push_back(std::move(oc));
    }

    const int primary_k = *std::min_element(cfg.eval.ks.begin(), cfg.eval.ks.end());
    outcome.table = render_ablation_table(outcome, primary_k);
    write_file(cfg.out_dir / "ablate" / "summary.json", ablation_to_json(outcome).dump(2) + "\n");
    write_file(cfg.out_dir / "ablate" / "summary.txt", outcome.table);
    write_run_manifest(cfg);
    return outcome;
}

nlohmann::json ablation_to_json(const AblationOutcome& outcome) {
    nlohmann::json cells = nlohmann::json::array();
    for (const CellOutcome& cell : outcome.cells) {
        nlohmann::json spaces = nlohmann::json::array();
        for (SpaceTag tag : cell.spaces) spaces.push_back(std::string(to_string(tag)));
        nlohmann::json j{{"label", cell.label},
                         {"spaces", std::move(spaces)},
                         {"negatives", std::string(to_string(cell.negatives))},
                         {"distinct_pairs", cell.distinct_pairs},
                         {"used_triplets", cell.used_triplets}};
        if (cell.error.empty()) {
            j["report"] = metric_report_to_json(cell.report);
        } else {
            j["error"] = cell.error;
        }
        cells.push_back(std::move(j));
    }
    return {{"format", "ablation-v1"}, {"cells", std::move(cells)}};
}

nlohmann::json build_run_manifest(const RunConfig& cfg) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::exists(cfg.out_dir)) {
        for (const auto& entry : std::filesystem::recursive_directory_iterator(cfg.out_dir)) {
            if (!entry.is_regular_file()) continue;
            const auto rel = std::filesystem::relative(entry.path(), cfg.out_dir);
            if (rel == std::filesystem::path("run-manifest.json")) continue;
            files.push_back(rel);
        }
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.generic_string() < b.generic_string(); });
    nlohmann::json artifacts = nlohmann::json::object();
    for (const auto& rel : files) artifacts[rel.generic_string()] = digest_file(cfg.out_dir / rel);
    return {{"format", "run-manifest-v1"},
            {"version", "0.1.0"},
            {"seed", cfg.seed},
            {"config_digest", digest_bytes(run_config_to_json(cfg).dump())},
            {"artifacts", std::move(artifacts)}};
}

void write_run_manifest(const RunConfig& cfg) {
    write_file(cfg.out_dir / "run-manifest.json", build_run_manifest(cfg).dump(2) + "\n");
}

}  // namespace pairforge
