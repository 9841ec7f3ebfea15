#pragma once
// Visit cohorts -> adjacent-visit prediction cases -> features and splits.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace kgcot {

struct Visit {
    std::string patient_id;
    std::uint64_t seq = 0;
    std::vector<std::string> codes; // sorted, unique
};

struct IndexCase {
    std::string case_id; // "<patient_id>:<index_seq>"
    std::string patient_id;
    std::uint64_t index_seq = 0;
    std::vector<std::string> codes;     // codes of visit t, sorted
    std::map<std::string, int> labels;  // disease_id -> 0/1 at visit t+1

    bool operator==(const IndexCase&) const = default;
};

struct FeatureVector {
    std::size_t dims = 0;
    std::vector<std::size_t> on_bits; // strictly increasing, all < dims
};

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::pair<std::string, std::string>> entries);

    std::size_t size() const { return codes_.size(); }
    const std::vector<std::string>& codes() const { return codes_; }
    const std::string& description(std::size_t index) const { return descriptions_.at(index); }
    std::optional<std::size_t> index_of(const std::string& code) const;
    std::string description_of(const std::string& code) const;

private:
    std::vector<std::string> codes_;
    std::vector<std::string> descriptions_;
    std::unordered_map<std::string, std::size_t> index_;
};

// code -> disease ids (one code may label several diseases).
using LabelMap = std::map<std::string, std::vector<std::string>>;

struct CohortSplit {
    std::uint64_t seed = 0;
    std::vector<std::string> test;
    std::map<std::size_t, std::vector<std::string>> train; // size -> case ids
    std::vector<std::string> dev;
};

std::vector<Visit> load_cohort(const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);
LabelMap load_label_map(const std::filesystem::path& path);

std::vector<IndexCase> build_pairs(const std::vector<Visit>& visits, const LabelMap& label_map,
                                   const std::vector<std::string>& targets);

// `unknown_codes` (optional) is incremented once per dropped code.
FeatureVector vectorize(const IndexCase& index_case, const Vocabulary& vocab,
                        std::size_t* unknown_codes = nullptr);

CohortSplit make_splits(const std::vector<IndexCase>& cases, std::uint64_t seed, double test_frac = 0.10,
                        const std::vector<std::size_t>& train_sizes = {400, 1000});

std::string split_name(std::size_t train_size);
std::string splits_to_json(const CohortSplit& split);
CohortSplit splits_from_json(const std::string& text);

std::string case_to_json(const IndexCase& index_case);
IndexCase case_from_json(const std::string& line);
std::vector<IndexCase> load_cases(const std::filesystem::path& path);

} // namespace kgcot
