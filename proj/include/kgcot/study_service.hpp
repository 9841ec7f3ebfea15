#pragma once
// Blinded pairwise preference study: two systems' explanations per unit,
// sides A/B assigned by a seeded coin flip that only the server knows.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

namespace kgcot {

struct SystemOutput {
    std::string unit_id;
    std::string input_summary;
    int ground_truth = 0;
    std::string prediction;
    std::string trace;
};

std::vector<SystemOutput> load_system_outputs(const std::filesystem::path& path);

struct ComparisonSide {
    std::string prediction;
    std::string trace;
};

struct ComparisonCase {
    std::string comparison_id; // "cmp-0001", ...
    std::string unit_id;
    std::string input_summary;
    int ground_truth = 0;
    ComparisonSide side_a;
    ComparisonSide side_b;
    int system_on_a = 1; // hidden assignment: 1 or 2
};

struct Study {
    std::uint64_t seed = 0;
    std::string system1_name = "system1";
    std::string system2_name = "system2";
    bool allow_ties = false;
    std::vector<ComparisonCase> comparisons; // ascending comparison_id

    const ComparisonCase* find(const std::string& comparison_id) const;
};

// Units are matched by unit_id and numbered in ascending unit_id order.
Study build_study(const std::vector<SystemOutput>& system1, const std::vector<SystemOutput>& system2,
                  std::uint64_t seed, std::string system1_name = "system1", std::string system2_name = "system2");

// Per-unit flip from (seed, unit_id): 1 when system 1 takes side A.
int side_a_system(std::uint64_t seed, const std::string& unit_id);

nlohmann::ordered_json study_to_json(const Study& study);
Study study_from_json(const nlohmann::json& j);
void save_study(const Study& study, const std::filesystem::path& path); // mode 0600
Study load_study(const std::filesystem::path& path);

enum class Dimension { clarity_coherence, coverage_relevance, correctness_soundness };

inline constexpr Dimension kDimensions[] = {Dimension::clarity_coherence, Dimension::coverage_relevance,
                                            Dimension::correctness_soundness};

const char* to_string(Dimension dimension);
std::optional<Dimension> dimension_from_string(const std::string& text);

struct PreferenceRecord {
    std::string comparison_id;
    std::string annotator_id;
    Dimension dimension = Dimension::clarity_coherence;
    std::string choice; // "A", "B", or "tie" when the study allows ties
    std::string timestamp;
};

// Throws InputError on an unknown comparison, dimension or choice.
PreferenceRecord preference_from_json(const nlohmann::json& j, const Study& study);
std::string preference_to_jsonl(const PreferenceRecord& record);

struct DimensionTally {
    std::size_t annotated = 0; // decided comparisons: wins1 + wins2
    std::size_t wins1 = 0;
    std::size_t wins2 = 0;
    std::size_t ties = 0;
};

struct StudyReport {
    std::size_t comparisons = 0;
    std::size_t records = 0; // latest records counted
    std::map<Dimension, DimensionTally> pooled;
    std::map<std::string, std::map<Dimension, DimensionTally>> per_annotator;
    std::vector<std::string> flags;
};

using PreferenceKey = std::tuple<std::string, std::string, Dimension>; // comparison, annotator, dimension

// Latest record per key, de-anonymized through the hidden assignment.
StudyReport tally(const Study& study, const std::map<PreferenceKey, PreferenceRecord>& latest);

std::optional<double> win_rate(const DimensionTally& t, int system);

nlohmann::ordered_json report_to_json(const StudyReport& report, const Study& study);

// Study plus its append-only preference log. Appends are serialized; reads
// may run concurrently.
class StudyState {
public:
    StudyState(Study study, std::filesystem::path log_path);

    const Study& study() const { return study_; }

    // Lowest-id comparison this annotator has not finished on every dimension.
    std::optional<nlohmann::ordered_json> next_case(const std::string& annotator_id) const;
    nlohmann::ordered_json done_payload(const std::string& annotator_id) const;

    // Appends each record as one line; all records are validated first.
    void record(const std::vector<PreferenceRecord>& records);

    StudyReport report() const;
    std::string export_log() const;
    std::size_t log_lines() const;

private:
    void apply(const PreferenceRecord& record);

    Study study_;
    std::filesystem::path log_path_;
    mutable std::shared_mutex mutex_;
    std::map<PreferenceKey, PreferenceRecord> latest_;
    std::size_t log_lines_ = 0;
};

// Rebuilds the latest-record map from a preference log.
std::map<PreferenceKey, PreferenceRecord> replay(const Study& study, const std::filesystem::path& log_path);

std::string utc_timestamp();

} // namespace kgcot
