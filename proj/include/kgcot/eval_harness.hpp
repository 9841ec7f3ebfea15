#pragma once
// Prediction scoring: accuracy, AUROC, AUPR and F1 per disease, plus
// unweighted macro means.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kgcot/cot_forge.hpp"
#include "kgcot/ehr_ingest.hpp"
#include "kgcot/llm_gateway.hpp"

namespace kgcot {

struct PredictionRecord {
    std::string case_id;
    std::string disease_id;
    double probability = 0.0;
    std::optional<bool> verdict;
    std::optional<std::string> trace;
    std::string method; // how `probability` was obtained
};

// Probability of concordance; ties count 1/2. nullopt when a class is empty.
std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Step-wise average precision over descending unique thresholds. nullopt
// without positives.
std::optional<double> aupr(const std::vector<double>& scores, const std::vector<int>& labels);

// exp(lp_yes) / (exp(lp_yes) + exp(lp_no)) when the scores carry both
// tokens; one token alone gives exp(lp) for yes or 1 - exp(lp) for no;
// otherwise 1 / 0 / 0.5 from the verdict.
double derive_probability(Conclusion conclusion, const std::optional<std::vector<TokenScore>>& token_scores,
                          std::string* method = nullptr);

struct DiseaseMetrics {
    double accuracy = 0.0;
    std::optional<double> auroc;
    std::optional<double> aupr;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support_pos = 0;
    std::size_t support_neg = 0;
};

struct MacroMetrics {
    std::optional<double> accuracy;
    std::optional<double> auroc;
    std::optional<double> aupr;
    std::optional<double> f1;
};

struct MetricReport {
    std::map<std::string, DiseaseMetrics> per_disease;
    MacroMetrics macro;
    double threshold = 0.5;
    std::size_t records = 0;
    std::vector<std::string> flags;
};

using LabelIndex = std::map<std::pair<std::string, std::string>, int>; // (case_id, disease_id) -> 0/1

LabelIndex label_index(const std::vector<IndexCase>& cases);

MetricReport classify_and_score(const std::vector<PredictionRecord>& records, const LabelIndex& labels,
                                double threshold = 0.5);

PredictionRecord prediction_from_json(const std::string& line);
std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path);

std::string metrics_json(const MetricReport& report);
std::string metrics_csv(const MetricReport& report);

} // namespace kgcot
