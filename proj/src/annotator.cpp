#include "pairforge/annotator.hpp"

#include "pairforge/io.hpp"
#include "pairforge/rng.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <set>
#include <thread>

namespace pairforge {

namespace {

constexpr std::size_t kMaxInstructionBytes = 512;

std::string pair_tag(const std::pair<std::string, std::string>& key) {
    return key.first + "|" + key.second;
}

const char* const kSubjects[10] = {"harbor",   "meadow", "market",  "workshop", "glacier",
                                   "orchard",  "rooftop", "lagoon",  "library",  "canyon"};
const char* const kMoods[5] = {"at dawn", "in heavy rain", "under neon light", "in winter",
                               "at closing time"};
const char* const kAngles[5] = {"from above", "close up", "from the shore", "through a window",
                                "in a mirror"};

}  // namespace

const std::vector<Demo>& builtin_demo_pool() {
    static const std::vector<Demo> pool = [] {
        std::vector<Demo> demos;
        demos.reserve(50);
        for (int i = 0; i < 50; ++i) {
            const std::string subject = kSubjects[i % 10];
            const std::string mood_q = kMoods[i % 5];
            const std::string mood_t = kMoods[(i + 2) % 5];
            const std::string angle = kAngles[(i / 10) % 5];
            Demo d;
            char id[16];
            std::snprintf(id, sizeof(id), "demo-%02d", i);
            d.id = id;
            d.query_caption = "a " + subject + " " + mood_q;
            d.target_caption = "the same " + subject + " " + mood_t + " " + angle;
            d.description = "Both frames show a " + subject + "; the target is taken " + angle +
                            " and " + mood_t + " instead of " + mood_q + ".";
            d.instructions = {"show the " + subject + " " + mood_t,
                              "view it " + angle + " " + mood_t,
                              "keep the " + subject + " but move to " + mood_t};
            demos.push_back(std::move(d));
        }
        return demos;
    }();
    return pool;
}

std::vector<Demo> demo_pool_from_file(const std::filesystem::path& path) {
    const nlohmann::json j = read_json(path);
    std::vector<Demo> pool;
    try {
        for (const auto& entry : j) {
            Demo d;
            d.id = entry.at("id").get<std::string>();
            d.query_caption = entry.at("query_caption").get<std::string>();
            d.target_caption = entry.at("target_caption").get<std::string>();
            d.description = entry.at("description").get<std::string>();
            d.instructions = entry.at("instructions").get<std::vector<std::string>>();
            pool.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("demo pool: ") + e.what());
    }
    return pool;
}

void write_demo_pool(const std::vector<Demo>& pool, const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& d : pool) {
        j.push_back({{"id", d.id},
                     {"query_caption", d.query_caption},
                     {"target_caption", d.target_caption},
                     {"description", d.description},
                     {"instructions", d.instructions}});
    }
    write_file(path, j.dump(2) + "\n");
}

PromptBundle build_describe_prompt(const MinedPair& pair, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "budget", pair.query_id + "|" + pair.target_id));
    PromptBundle bundle;
    bundle.stage = PromptStage::Describe;
    bundle.rng_seed = seed;
    bundle.word_budget = 60 + static_cast<int>(rng.next_below(41));
    bundle.rendered_prompt =
        "Look at the query image and the target image. State the concepts the two share, then "
        "describe how the target differs from the query, in about " +
        std::to_string(bundle.word_budget) + " words.";
    return bundle;
}

PromptBundle build_refine_prompt(const PairDescription& desc, const std::vector<Demo>& demo_pool,
                                 std::uint64_t seed) {
    if (demo_pool.size() != 50) {
        fail(Errc::BadPoolSize, "demo pool has " + std::to_string(demo_pool.size()) +
                                    " entries, expected 50");
    }
    Rng rng(derive_seed(seed, "demos", pair_tag(desc.pair_key)));
    const std::vector<std::size_t> picks = rng.sample_without_replacement(demo_pool.size(), 5);

    PromptBundle bundle;
    bundle.stage = PromptStage::Refine;
    bundle.rng_seed = seed;
    std::string prompt =
        "Rewrite an image-pair description into retrieval instructions. Examples:\n";
    for (std::size_t pick : picks) {
        const Demo& d = demo_pool[pick];
        bundle.demonstrations_used.push_back(d.id);
        prompt += "- description: " + d.description + "\n  instructions:";
        for (const auto& instruction : d.instructions) prompt += " <" + instruction + ">";
        prompt += "\n";
    }
    prompt += "Now the description is: " + desc.text +
              "\nWrite at least three distinct single-line instructions that would retrieve the "
              "target starting from the query image.";
    bundle.rendered_prompt = std::move(prompt);
    return bundle;
}

namespace {

// Mock describe output is structured so that the mock refine step can
// recover the two captions without any shared state.
constexpr const char* kQueryMark = " Query: ";
constexpr const char* kTargetMark = " Target: ";
constexpr const char* kTailMark = " Apart: ";

std::vector<std::string> caption_tokens(const std::string& caption) {
    std::vector<std::string> tokens;
    std::size_t start = 0;
    while (start < caption.size()) {
        std::size_t end = caption.find(' ', start);
        if (end == std::string::npos) end = caption.size();
        if (end > start) tokens.push_back(caption.substr(start, end - start));
        start = end + 1;
    }
    return tokens;
}

}  // namespace

std::string MockAnnotationProvider::describe(const DescribeRequest& request) {
    const std::vector<std::string> q_tokens = caption_tokens(request.query_caption);
    const std::vector<std::string> t_tokens = caption_tokens(request.target_caption);
    const std::set<std::string> q_set(q_tokens.begin(), q_tokens.end());

    std::string shared;
    std::string apart;
    for (const auto& token : t_tokens) {
        if (q_set.count(token)) {
            if (!shared.empty()) shared += ' ';
            shared += token;
        } else {
            if (!apart.empty()) apart += ' ';
            apart += token;
        }
    }
    if (shared.empty()) shared = "little";
    if (apart.empty()) apart = "nothing beyond framing";

    return "Shared: " + shared + "." + kQueryMark + request.query_caption + "." + kTargetMark +
           request.target_caption + "." + kTailMark + apart + ".";
}

std::vector<std::string> MockAnnotationProvider::refine(const std::string& description,
                                                        const std::string& prompt) {
    std::string query_caption;
    std::string target_caption = description;
    const std::size_t q_at = description.find(kQueryMark);
    const std::size_t t_at = description.find(kTargetMark);
    const std::size_t tail_at = description.find(kTailMark);
    if (q_at != std::string::npos && t_at != std::string::npos && tail_at != std::string::npos) {
        const std::size_t q_begin = q_at + std::string(kQueryMark).size();
        query_caption = description.substr(q_begin, t_at - 1 - q_begin);  // strip trailing dot
        const std::size_t t_begin = t_at + std::string(kTargetMark).size();
        target_caption = description.substr(t_begin, tail_at - 1 - t_begin);
    }
    // Name the source image by an opaque handle instead of restating its
    // caption: the edit instruction has to identify the pair, but any query
    // wording it repeats becomes a signal that points retrieval back at the
    // query image rather than at the requested edit.
    const std::string source_tag = "scene-" + digest_bytes(query_caption).substr(8, 8);

    static const char* const kVerbs[3][3] = {{"change it to", "turn it into", "make it"},
                                             {"switch to", "move to", "go to"},
                                             {"swap the scene for", "replace everything with",
                                              "trade the view for"}};
    const std::uint64_t pick = derive_seed(seed_, "verbs", description) % 3;
    std::vector<std::string> out = {
        std::string(kVerbs[0][pick]) + " " + target_caption,
        "from " + source_tag + " " + kVerbs[1][pick] + " " + target_caption,
        std::string(kVerbs[2][pick]) + " " + target_caption + " keeping nothing else",
    };
    (void)prompt;
    return out;
}

HttpAnnotationProvider::HttpAnnotationProvider(std::string host, int port, int timeout_ms)
    : host_(std::move(host)), port_(port), timeout_ms_(timeout_ms) {
    id_ = "http-annotator:" + host_ + ":" + std::to_string(port_);
}

namespace {

nlohmann::json post_json(const std::string& host, int port, int timeout_ms,
                         const std::string& path, const nlohmann::json& body) {
    httplib::Client client(host, port);
    client.set_connection_timeout(0, timeout_ms * 1000);
    client.set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) {
        fail(Errc::ProviderUnavailable,
             path + ": " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        fail(Errc::ProviderUnavailable, path + ": HTTP " + std::to_string(res->status));
    }
    nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) fail(Errc::MalformedProviderReply, path + ": body is not JSON");
    return reply;
}

}  // namespace

std::string HttpAnnotationProvider::describe(const DescribeRequest& request) {
    const nlohmann::json reply = post_json(host_, port_, timeout_ms_, "/v1/describe",
                                           {{"query_uri", request.query_uri},
                                            {"target_uri", request.target_uri},
                                            {"query_caption", request.query_caption},
                                            {"target_caption", request.target_caption},
                                            {"prompt", request.prompt}});
    if (!reply.contains("text") || !reply["text"].is_string()) {
        fail(Errc::MalformedProviderReply, "/v1/describe: missing text");
    }
    return reply["text"].get<std::string>();
}

std::vector<std::string> HttpAnnotationProvider::refine(const std::string& description,
                                                        const std::string& prompt) {
    const nlohmann::json reply = post_json(host_, port_, timeout_ms_, "/v1/refine",
                                           {{"description", description}, {"prompt", prompt}});
    if (!reply.contains("instructions") || !reply["instructions"].is_array()) {
        fail(Errc::MalformedProviderReply, "/v1/refine: missing instructions");
    }
    std::vector<std::string> out;
    for (const auto& entry : reply["instructions"]) {
        if (!entry.is_string()) {
            fail(Errc::MalformedProviderReply, "/v1/refine: non-string instruction");
        }
        out.push_back(entry.get<std::string>());
    }
    return out;
}

std::string normalized_instruction(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

namespace {

/// Drops empty, over-long and (normalized-)duplicate instructions, keeping
/// first occurrences in order.
std::vector<std::string> usable_instructions(const std::vector<std::string>& raw) {
    std::vector<std::string> kept;
    std::set<std::string> seen;
    for (const auto& text : raw) {
        if (text.empty() || text.size() > kMaxInstructionBytes) continue;
        const std::string key = normalized_instruction(text);
        if (key.empty()) continue;
        if (seen.insert(key).second) kept.push_back(text);
    }
    return kept;
}

template <class Fn>
auto with_retries(Fn&& call, const AnnotateOptions& options, AnnotateStats* stats)
    -> decltype(call()) {
    for (int attempt = 0;; ++attempt) {
        try {
            return call();
        } catch (const Error& e) {
            if (e.code() != Errc::ProviderUnavailable || attempt >= options.max_retries) {
                if (e.code() == Errc::ProviderUnavailable) {
                    fail(Errc::ProviderUnavailable,
                         std::string(e.what()) + " (after " + std::to_string(attempt + 1) +
                             " attempts)");
                }
                throw;
            }
            if (stats) ++stats->retries;
            if (options.backoff_ms > 0) {
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(options.backoff_ms << attempt));
            }
        }
    }
}

}  // namespace

std::pair<PairDescription, InstructionSet> annotate_pair(const MinedPair& pair,
                                                         const Corpus& corpus,
                                                         AnnotationProvider& provider,
                                                         const std::vector<Demo>& demo_pool,
                                                         const AnnotateOptions& options,
                                                         AnnotateStats* stats) {
    const CorpusItem& query = corpus.item(corpus.index_of(pair.query_id));
    const CorpusItem& target = corpus.item(corpus.index_of(pair.target_id));

    const PromptBundle describe_bundle = build_describe_prompt(pair, options.seed);
    DescribeRequest request;
    request.query_uri = query.payload_uri.value_or("");
    request.target_uri = target.payload_uri.value_or("");
    request.query_caption = query.caption;
    request.target_caption = target.caption;
    request.prompt = describe_bundle.rendered_prompt;

    const std::string text =
        with_retries([&] { return provider.describe(request); }, options, stats);
    if (text.empty()) fail(Errc::MalformedProviderReply, "describe returned empty text");

    PairDescription desc;
    desc.pair_key = {pair.query_id, pair.target_id};
    desc.text = text;
    desc.word_budget = describe_bundle.word_budget;
    desc.provider_id = provider.id();

    const PromptBundle refine_bundle = build_refine_prompt(desc, demo_pool, options.seed);
    std::vector<std::string> kept = usable_instructions(with_retries(
        [&] { return provider.refine(desc.text, refine_bundle.rendered_prompt); }, options,
        stats));
    if (kept.size() < 3) {
        if (stats) ++stats->reasks;
        const std::string nudge = refine_bundle.rendered_prompt +
                                  "\nThe previous reply had too few distinct instructions; give "
                                  "at least three clearly different ones.";
        std::vector<std::string> retry = with_retries(
            [&] { return provider.refine(desc.text, nudge); }, options, stats);
        std::vector<std::string> merged = kept;
        merged.insert(merged.end(), retry.begin(), retry.end());
        kept = usable_instructions(merged);
        if (kept.size() < 3) {
            fail(Errc::TooFewInstructions, "got " + std::to_string(kept.size()) +
                                               " distinct instructions for pair " +
                                               pair_tag(desc.pair_key));
        }
    }

    InstructionSet set;
    set.pair_key = desc.pair_key;
    set.instructions = std::move(kept);
    set.provider_id = provider.id();
    if (stats) ++stats->annotated;
    return {std::move(desc), std::move(set)};
}

AnnotateStats annotate_records(std::vector<TripletRecord>& records, const Corpus& corpus,
                               AnnotationProvider& provider, const std::vector<Demo>& demo_pool,
                               const AnnotateOptions& options) {
    const int workers = std::max(1, options.max_inflight);
    std::vector<AnnotateStats> stats(static_cast<std::size_t>(workers));
    std::vector<std::exception_ptr> errors(records.size());

    const auto annotate_one = [&](std::size_t i, AnnotateStats* local) {
        TripletRecord& record = records[i];
        MinedPair pair;
        pair.query_id = record.query_id;
        pair.target_id = record.target_id;
        pair.space = record.space;
        pair.score = record.score;
        auto [desc, set] = annotate_pair(pair, corpus, provider, demo_pool, options, local);
        record.instructions = std::move(set.instructions);
        record.provenance.annotator_id = set.provider_id;
    };

    if (workers == 1) {
        for (std::size_t i = 0; i < records.size(); ++i) annotate_one(i, &stats[0]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = next.fetch_add(1); i < records.size();
                     i = next.fetch_add(1)) {
                    try {
                        annotate_one(i, &stats[static_cast<std::size_t>(w)]);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        for (const auto& error : errors) {
            if (error) std::rethrow_exception(error);  // first in record order
        }
    }

    AnnotateStats total;
    for (const auto& s : stats) {
        total.annotated += s.annotated;
        total.retries += s.retries;
        total.reasks += s.reasks;
    }
    return total;
}

}  // namespace pairforge
