#include "pairforge/evalkit.hpp"

#include "pairforge/corpus.hpp"
#include "pairforge/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace pairforge {

std::string_view to_string(EvalProtocol protocol) {
    return protocol == EvalProtocol::FullCorpus ? "full_corpus" : "subset_only";
}

void validate_task(const EvalTask& task) {
    if (task.pool.empty()) fail(Errc::InvalidParam, "candidate pool is empty");
    for (const auto& query : task.queries) {
        if (query.ground_truth.empty()) fail(Errc::EmptyGroundTruth, query.query_id);
        for (const auto& id : query.ground_truth) {
            if (!task.pool.count(id)) {
                fail(Errc::InvalidParam,
                     "ground truth '" + id + "' of query " + query.query_id + " not in pool");
            }
        }
        if (task.protocol == EvalProtocol::SubsetOnly) {
            if (!query.subset_ids) {
                fail(Errc::InvalidParam, "query " + query.query_id + " lacks subset_ids");
            }
            const std::set<std::string> subset(query.subset_ids->begin(),
                                               query.subset_ids->end());
            for (const auto& id : *query.subset_ids) {
                if (!task.pool.count(id)) {
                    fail(Errc::InvalidParam, "subset id '" + id + "' not in pool");
                }
            }
            for (const auto& id : query.ground_truth) {
                if (!subset.count(id)) {
                    fail(Errc::InvalidParam, "ground truth '" + id + "' of query " +
                                                 query.query_id + " not in its subset");
                }
            }
        }
    }
}

std::vector<std::string> rank_candidates(
    const Eigen::VectorXd& query, const std::map<std::string, Eigen::VectorXd>& pool,
    const std::optional<std::vector<std::string>>& restrict_to) {
    if (pool.empty()) fail(Errc::InvalidParam, "candidate pool is empty");
    std::vector<std::pair<double, const std::string*>> scored;
    if (restrict_to) {
        if (restrict_to->empty()) fail(Errc::EmptyRestriction, "restriction set is empty");
        scored.reserve(restrict_to->size());
        for (const auto& id : *restrict_to) {
            auto it = pool.find(id);
            if (it == pool.end()) fail(Errc::UnknownItem, id);
            scored.emplace_back(it->second.dot(query), &it->first);
        }
    } else {
        scored.reserve(pool.size());
        for (const auto& [id, vec] : pool) scored.emplace_back(vec.dot(query), &id);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return *a.second < *b.second;
    });
    std::vector<std::string> ranked;
    ranked.reserve(scored.size());
    for (const auto& [score, id] : scored) ranked.push_back(*id);
    return ranked;
}

double map_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gt, int k) {
    if (k < 1) fail(Errc::InvalidParam, "k must be positive");
    if (gt.empty()) fail(Errc::EmptyGroundTruth, "ground truth set is empty");
    const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    double hits = 0.0;
    double ap = 0.0;
    for (std::size_t i = 0; i < depth; ++i) {
        if (gt.count(ranked[i])) {
            hits += 1.0;
            ap += hits / static_cast<double>(i + 1);
        }
    }
    const double denom = static_cast<double>(std::min<std::size_t>(gt.size(),
                                                                   static_cast<std::size_t>(k)));
    return ap / denom;
}

double recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gt,
                   int k) {
    if (k < 1) fail(Errc::InvalidParam, "k must be positive");
    if (gt.empty()) fail(Errc::EmptyGroundTruth, "ground truth set is empty");
    const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    double hits = 0.0;
    for (std::size_t i = 0; i < depth; ++i) {
        if (gt.count(ranked[i])) hits += 1.0;
    }
    return hits / static_cast<double>(gt.size());
}

MetricReport run_protocol(const EvalTask& task, const std::vector<int>& ks) {
    if (ks.empty()) fail(Errc::InvalidParam, "no k values configured");
    if (task.queries.empty()) fail(Errc::InvalidParam, "task has no queries");
    validate_task(task);

    MetricReport report;
    for (int k : ks) {
        if (task.protocol == EvalProtocol::FullCorpus) {
            report.map_at[k] = 0.0;
            report.recall_at[k] = 0.0;
        } else {
            report.subset_recall_at[k] = 0.0;
        }
    }
    for (const auto& query : task.queries) {
        const auto restrict_to = task.protocol == EvalProtocol::SubsetOnly
                                     ? query.subset_ids
                                     : std::optional<std::vector<std::string>>{};
        const std::vector<std::string> ranked =
            rank_candidates(query.embedding, task.pool, restrict_to);
        for (int k : ks) {
            if (task.protocol == EvalProtocol::FullCorpus) {
                report.map_at[k] += map_at_k(ranked, query.ground_truth, k);
                report.recall_at[k] += recall_at_k(ranked, query.ground_truth, k);
            } else {
                report.subset_recall_at[k] += recall_at_k(ranked, query.ground_truth, k);
            }
        }
    }
    const double q = static_cast<double>(task.queries.size());
    for (auto& [k, v] : report.map_at) v /= q;
    for (auto& [k, v] : report.recall_at) v /= q;
    for (auto& [k, v] : report.subset_recall_at) v /= q;
    return report;
}

MetricReport run_suite(const std::map<std::string, EvalTask>& subtasks,
                       const std::vector<int>& ks) {
    if (subtasks.empty()) fail(Errc::InvalidParam, "no subtasks configured");
    const int primary_k = *std::min_element(ks.begin(), ks.end());
    MetricReport report;
    double sum = 0.0;
    for (const auto& [name, task] : subtasks) {
        MetricReport sub = run_protocol(task, ks);
        sum += task.protocol == EvalProtocol::SubsetOnly ? sub.subset_recall_at.at(primary_k)
                                                         : sub.recall_at.at(primary_k);
        report.per_subtask.emplace(name, std::move(sub));
    }
    report.macro_average = sum / static_cast<double>(subtasks.size());
    return report;
}

nlohmann::json metric_report_to_json(const MetricReport& report) {
    nlohmann::json j = nlohmann::json::object();
    const auto put = [&](const char* name, const std::map<int, double>& values) {
        if (values.empty()) return;
        nlohmann::json entry = nlohmann::json::object();
        for (const auto& [k, v] : values) entry[std::to_string(k)] = v;
        j[name] = std::move(entry);
    };
    put("map_at", report.map_at);
    put("recall_at", report.recall_at);
    put("subset_recall_at", report.subset_recall_at);
    if (!report.per_subtask.empty()) {
        nlohmann::json subs = nlohmann::json::object();
        for (const auto& [name, sub] : report.per_subtask) {
            subs[name] = metric_report_to_json(sub);
        }
        j["per_subtask"] = std::move(subs);
    }
    if (report.macro_average) j["macro_average"] = *report.macro_average;
    return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(Errc::MalformedRecord, "metric report must be a JSON object");
    MetricReport report;
    try {
        const auto take = [&](const char* name, std::map<int, double>& into) {
            if (!j.contains(name)) return;
            if (!j.at(name).is_object()) {
                fail(Errc::MalformedRecord, std::string(name) + " must map k to a value");
            }
            for (const auto& [k, v] : j.at(name).items()) into[std::stoi(k)] = v.get<double>();
        };
        take("map_at", report.map_at);
        take("recall_at", report.recall_at);
        take("subset_recall_at", report.subset_recall_at);
        if (j.contains("per_subtask")) {
            for (const auto& [name, sub] : j.at("per_subtask").items()) {
                report.per_subtask.emplace(name, metric_report_from_json(sub));
            }
        }
        if (j.contains("macro_average")) {
            report.macro_average = j.at("macro_average").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("metric report: ") + e.what());
    } catch (const std::invalid_argument&) {
        fail(Errc::MalformedRecord, "metric report: non-numeric k");
    }
    return report;
}

namespace {

void render_report_lines(const MetricReport& report, const std::string& heading,
                         std::ostringstream& out) {
    std::vector<int> ks;
    for (const auto& [k, v] : report.map_at) ks.push_back(k);
    for (const auto& [k, v] : report.recall_at) {
        if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
    }
    for (const auto& [k, v] : report.subset_recall_at) {
        if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
    }
    std::sort(ks.begin(), ks.end());

    if (!heading.empty()) out << heading << "\n";
    if (!ks.empty()) {
        out << "  metric     ";
        for (int k : ks) {
            char cell[16];
            std::snprintf(cell, sizeof(cell), " k=%-7d", k);
            out << cell;
        }
        out << "\n";
        const auto row = [&](const char* name, const std::map<int, double>& values) {
            if (values.empty()) return;
            char head[32];
            std::snprintf(head, sizeof(head), "  %-11s", name);
            out << head;
            for (int k : ks) {
                char cell[16];
                auto it = values.find(k);
                if (it == values.end()) {
                    std::snprintf(cell, sizeof(cell), " %-9s", "-");
                } else {
                    std::snprintf(cell, sizeof(cell), " %-9.4f", it->second);
                }
                out << cell;
            }
            out << "\n";
        };
        row("mAP", report.map_at);
        row("R", report.recall_at);
        row("R_s", report.subset_recall_at);
    }
    if (report.macro_average) {
        char line[48];
        std::snprintf(line, sizeof(line), "  macro_avg   %.4f", *report.macro_average);
        out << line << "\n";
    }
    for (const auto& [name, sub] : report.per_subtask) {
        render_report_lines(sub, heading.empty() ? name : heading + "/" + name, out);
    }
}

}  // namespace

std::string render_metric_table(const MetricReport& report) {
    std::ostringstream out;
    render_report_lines(report, "", out);
    return out.str();
}

namespace {

CorpusItem vector_record(const std::string& id, const Eigen::VectorXd& values) {
    CorpusItem item;
    item.item_id = id;
    item.embeddings[SpaceTag::VisualSemantic] = values;
    return item;
}

}  // namespace

void save_eval_task(const EvalTask& task, const std::filesystem::path& dir) {
    nlohmann::json queries = nlohmann::json::array();
    std::string query_lines;
    for (const auto& query : task.queries) {
        nlohmann::json q{{"query_id", query.query_id},
                         {"ground_truth", std::vector<std::string>(query.ground_truth.begin(),
                                                                   query.ground_truth.end())}};
        if (query.subset_ids) q["subset_ids"] = *query.subset_ids;
        queries.push_back(std::move(q));
        query_lines += record_to_json(vector_record(query.query_id, query.embedding)).dump();
        query_lines += '\n';
    }
    const nlohmann::json manifest = {{"format", "evaltask-v1"},
                                     {"protocol", std::string(to_string(task.protocol))},
                                     {"queries", std::move(queries)}};
    write_file(dir / "task.json", manifest.dump(2) + "\n");
    write_file(dir / "queries.jsonl", query_lines);

    std::string pool_lines;
    for (const auto& [id, values] : task.pool) {
        pool_lines += record_to_json(vector_record(id, values)).dump();
        pool_lines += '\n';
    }
    write_file(dir / "pool.jsonl", pool_lines);
}

EvalTask load_eval_task(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_json(dir / "task.json");
    EvalTask task;
    try {
        if (manifest.at("format").get<std::string>() != "evaltask-v1") {
            fail(Errc::MalformedRecord, "unknown eval task format tag");
        }
        const std::string protocol = manifest.at("protocol").get<std::string>();
        if (protocol == "full_corpus") {
            task.protocol = EvalProtocol::FullCorpus;
        } else if (protocol == "subset_only") {
            task.protocol = EvalProtocol::SubsetOnly;
        } else {
            fail(Errc::MalformedRecord, "unknown protocol " + protocol);
        }

        std::map<std::string, Eigen::VectorXd> query_vectors;
        for_each_line(dir / "queries.jsonl", [&](std::size_t line_no, const std::string& line) {
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                fail(Errc::MalformedRecord, "queries.jsonl:" + std::to_string(line_no));
            }
            CorpusItem item = record_from_json(j, line_no);
            query_vectors[item.item_id] = item.embeddings.at(SpaceTag::VisualSemantic);
        });

        for (const auto& q : manifest.at("queries")) {
            EvalQuery query;
            query.query_id = q.at("query_id").get<std::string>();
            for (const auto& id : q.at("ground_truth")) {
                query.ground_truth.insert(id.get<std::string>());
            }
            if (q.contains("subset_ids")) {
                query.subset_ids = q.at("subset_ids").get<std::vector<std::string>>();
            }
            auto it = query_vectors.find(query.query_id);
            if (it == query_vectors.end()) {
                fail(Errc::MalformedRecord, "query " + query.query_id + " lacks an embedding");
            }
            query.embedding = it->second;
            task.queries.push_back(std::move(query));
        }

        for_each_line(dir / "pool.jsonl", [&](std::size_t line_no, const std::string& line) {
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                fail(Errc::MalformedRecord, "pool.jsonl:" + std::to_string(line_no));
            }
            CorpusItem item = record_from_json(j, line_no);
            task.pool[item.item_id] = item.embeddings.at(SpaceTag::VisualSemantic);
        });
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedRecord, std::string("eval task: ") + e.what());
    }
    return task;
}

}  // namespace pairforge
