#pragma once

#include "pairforge/types.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace pairforge {

enum class EvalProtocol { FullCorpus, SubsetOnly };

std::string_view to_string(EvalProtocol protocol);

struct EvalQuery {
    std::string query_id;
    Eigen::VectorXd embedding;
    std::set<std::string> ground_truth;
    std::optional<std::vector<std::string>> subset_ids;  // required by SubsetOnly
};

struct EvalTask {
    EvalProtocol protocol = EvalProtocol::FullCorpus;
    std::vector<EvalQuery> queries;
    std::map<std::string, Eigen::VectorXd> pool;
};

/// Throws InvalidParam / EmptyGroundTruth when the task invariants do not
/// hold (ground truth inside the pool; SubsetOnly subsets present, inside
/// the pool and covering their ground truth).
void validate_task(const EvalTask& task);

/// Descending dot-product ranking, ties by ascending id. restrict_to limits
/// the ranking to those pool ids. Throws EmptyRestriction / UnknownItem.
std::vector<std::string> rank_candidates(const Eigen::VectorXd& query,
                                         const std::map<std::string, Eigen::VectorXd>& pool,
                                         const std::optional<std::vector<std::string>>& restrict_to);

/// AP@k with the multi-ground-truth normalizer min(|gt|, k).
double map_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gt, int k);

/// |gt within top-k| / |gt|.
double recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gt, int k);

struct MetricReport {
    std::map<int, double> map_at;
    std::map<int, double> recall_at;
    std::map<int, double> subset_recall_at;
    std::map<std::string, MetricReport> per_subtask;
    std::optional<double> macro_average;
};

/// FullCorpus fills map_at/recall_at over the whole pool; SubsetOnly ranks
/// within each query's subset and fills subset_recall_at.
MetricReport run_protocol(const EvalTask& task, const std::vector<int>& ks);

/// Runs every subtask and macro-averages the primary metric (recall at the
/// smallest k, subset recall for SubsetOnly subtasks).
MetricReport run_suite(const std::map<std::string, EvalTask>& subtasks,
                       const std::vector<int>& ks);

nlohmann::json metric_report_to_json(const MetricReport& report);
MetricReport metric_report_from_json(const nlohmann::json& j);

/// Aligned plain-text rendering of a report (one row per metric, one column
/// per k), subtasks listed beneath.
std::string render_metric_table(const MetricReport& report);

/// Directory layout: task.json (protocol + queries) plus pool.jsonl and
/// queries.jsonl holding the vectors in the corpus record schema.
void save_eval_task(const EvalTask& task, const std::filesystem::path& dir);
EvalTask load_eval_task(const std::filesystem::path& dir);

}  // namespace pairforge
