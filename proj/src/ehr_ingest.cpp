#include "kgcot/ehr_ingest.hpp"

#include "kgcot/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

Vocabulary::Vocabulary(std::vector<std::pair<std::string, std::string>> entries) {
    for (auto& [code, description] : entries) {
        if (!index_.emplace(code, codes_.size()).second) {
            throw InputError("duplicate vocabulary code: " + code);
        }
        codes_.push_back(std::move(code));
        descriptions_.push_back(std::move(description));
    }
}

std::optional<std::size_t> Vocabulary::index_of(const std::string& code) const {
    const auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::string Vocabulary::description_of(const std::string& code) const {
    const auto index = index_of(code);
    return index ? descriptions_[*index] : code;
}

namespace {

std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path,
                                               const std::vector<std::string>& expected_header) {
    if (!std::filesystem::exists(path)) throw InputError("missing file: " + path.string());
    const auto lines = read_lines(path);
    std::vector<std::vector<std::string>> rows;
    bool header_seen = false;
    std::size_t line_no = 0;
    for (const auto& line : lines) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = split(line, '\t');
        if (!header_seen) {
            header_seen = true;
            if (fields.size() < expected_header.size() ||
                !std::equal(expected_header.begin(), expected_header.end(), fields.begin())) {
                throw InputError(path.string() + ": expected header starting with \"" + expected_header[0] +
                                 "\"");
            }
            continue;
        }
        if (fields.size() < expected_header.size()) {
            throw InputError(path.string() + ": line " + std::to_string(line_no) + " has too few fields");
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

} // namespace

std::vector<Visit> load_cohort(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InputError("missing file: " + path.string());
    const auto lines = read_lines(path);

    std::vector<std::string> patient_order;
    std::map<std::string, std::map<std::uint64_t, Visit>> by_patient;
    std::size_t line_no = 0;
    for (const auto& line : lines) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto where = path.string() + ": line " + std::to_string(line_no);
        json object;
        try {
            object = json::parse(line);
        } catch (const json::parse_error& e) {
            throw InputError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!object.is_object() || !object.contains("patient_id") || !object["patient_id"].is_string() ||
            !object.contains("visits") || !object["visits"].is_array()) {
            throw InputError(where + ": expected {\"patient_id\": string, \"visits\": [...]}");
        }
        const auto patient_id = object["patient_id"].get<std::string>();
        auto [slot, fresh] = by_patient.try_emplace(patient_id);
        if (fresh) patient_order.push_back(patient_id);
        for (const auto& v : object["visits"]) {
            if (!v.is_object() || !v.contains("seq") || !v["seq"].is_number_unsigned() || !v.contains("codes") ||
                !v["codes"].is_array()) {
                throw InputError(where + ": visit needs a non-negative integer \"seq\" and a \"codes\" array");
            }
            Visit visit{patient_id, v["seq"].get<std::uint64_t>(), {}};
            for (const auto& code : v["codes"]) {
                if (!code.is_string()) throw InputError(where + ": codes must be strings");
                visit.codes.push_back(code.get<std::string>());
            }
            std::sort(visit.codes.begin(), visit.codes.end());
            visit.codes.erase(std::unique(visit.codes.begin(), visit.codes.end()), visit.codes.end());
            const auto seq = visit.seq;
            if (!slot->second.emplace(seq, std::move(visit)).second) {
                throw InputError(where + ": duplicate visit seq " + std::to_string(seq) + " for patient " +
                                 patient_id);
            }
        }
    }

    std::vector<Visit> visits;
    for (const auto& patient_id : patient_order) {
        for (auto& [seq, visit] : by_patient[patient_id]) visits.push_back(std::move(visit));
    }
    return visits;
}

Vocabulary load_vocab(const std::filesystem::path& path) {
    std::vector<std::pair<std::string, std::string>> entries;
    for (auto& row : read_tsv(path, {"code", "description"})) {
        if (trim(row[1]).empty()) throw InputError(path.string() + ": empty description for code " + row[0]);
        entries.emplace_back(std::move(row[0]), std::move(row[1]));
    }
    return Vocabulary(std::move(entries));
}

LabelMap load_label_map(const std::filesystem::path& path) {
    LabelMap map;
    for (auto& row : read_tsv(path, {"code", "disease_id"})) {
        auto& diseases = map[row[0]];
        if (std::find(diseases.begin(), diseases.end(), row[1]) == diseases.end()) {
            diseases.push_back(std::move(row[1]));
        }
    }
    return map;
}

std::vector<IndexCase> build_pairs(const std::vector<Visit>& visits, const LabelMap& label_map,
                                   const std::vector<std::string>& targets) {
    if (targets.empty()) throw InputError("build_pairs: empty disease target list");

    std::vector<std::string> order;
    std::map<std::string, std::vector<const Visit*>> by_patient;
    for (const auto& visit : visits) {
        auto [slot, fresh] = by_patient.try_emplace(visit.patient_id);
        if (fresh) order.push_back(visit.patient_id);
        slot->second.push_back(&visit);
    }

    std::vector<IndexCase> cases;
    for (const auto& patient_id : order) {
        auto& history = by_patient[patient_id];
        std::sort(history.begin(), history.end(), [](const Visit* a, const Visit* b) { return a->seq < b->seq; });
        for (std::size_t t = 0; t + 1 < history.size(); ++t) {
            const auto& current = *history[t];
            const auto& next = *history[t + 1];
            if (current.seq == next.seq) {
                throw InputError("duplicate visit seq " + std::to_string(current.seq) + " for patient " + patient_id);
            }
            IndexCase index_case;
            index_case.case_id = patient_id + ":" + std::to_string(current.seq);
            index_case.patient_id = patient_id;
            index_case.index_seq = current.seq;
            index_case.codes = current.codes;
            for (const auto& disease : targets) index_case.labels[disease] = 0;
            for (const auto& code : next.codes) {
                const auto it = label_map.find(code);
                if (it == label_map.end()) continue;
                for (const auto& disease : it->second) {
                    if (index_case.labels.contains(disease)) index_case.labels[disease] = 1;
                }
            }
            cases.push_back(std::move(index_case));
        }
    }
    return cases;
}

FeatureVector vectorize(const IndexCase& index_case, const Vocabulary& vocab, std::size_t* unknown_codes) {
    FeatureVector vector{vocab.size(), {}};
    for (const auto& code : index_case.codes) {
        if (const auto index = vocab.index_of(code)) {
            vector.on_bits.push_back(*index);
        } else if (unknown_codes) {
            ++*unknown_codes;
        }
    }
    std::sort(vector.on_bits.begin(), vector.on_bits.end());
    vector.on_bits.erase(std::unique(vector.on_bits.begin(), vector.on_bits.end()), vector.on_bits.end());
    return vector;
}

std::string split_name(std::size_t train_size) { return "train_" + std::to_string(train_size); }

CohortSplit make_splits(const std::vector<IndexCase>& cases, std::uint64_t seed, double test_frac,
                        const std::vector<std::size_t>& train_sizes) {
    if (test_frac < 0.0 || test_frac >= 1.0) throw InputError("test_frac must lie in [0, 1)");
    const auto total = cases.size();
    const auto test_size =
        static_cast<std::size_t>(std::floor(test_frac * static_cast<double>(total) + 1e-9));
    const auto largest = train_sizes.empty() ? 0 : *std::max_element(train_sizes.begin(), train_sizes.end());
    if (largest + test_size > total) {
        throw InputError("insufficient cases: " + std::to_string(total) + " available, " +
                         std::to_string(test_size) + " test + " + std::to_string(largest) + " train requested");
    }

    std::vector<std::string> ids;
    ids.reserve(total);
    for (const auto& c : cases) ids.push_back(c.case_id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InputError("duplicate case_id in cohort");
    seeded_shuffle(ids, seed);

    CohortSplit split;
    split.seed = seed;
    split.test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(test_size));
    const auto pool_begin = ids.begin() + static_cast<std::ptrdiff_t>(test_size);
    // Train sets are prefixes of one shuffled pool, hence nested.
    for (const auto size : train_sizes) {
        split.train[size].assign(pool_begin, pool_begin + static_cast<std::ptrdiff_t>(size));
    }
    split.dev.assign(pool_begin + static_cast<std::ptrdiff_t>(largest), ids.end());

    std::sort(split.test.begin(), split.test.end());
    for (auto& [size, members] : split.train) std::sort(members.begin(), members.end());
    std::sort(split.dev.begin(), split.dev.end());
    return split;
}

std::string splits_to_json(const CohortSplit& split) {
    ordered_json out;
    out["seed"] = split.seed;
    out["test"] = split.test;
    for (const auto& [size, members] : split.train) out[split_name(size)] = members;
    out["dev"] = split.dev;
    return out.dump(2) + "\n";
}

CohortSplit splits_from_json(const std::string& text) {
    try {
        const auto in = json::parse(text);
        CohortSplit split;
        split.seed = in.at("seed").get<std::uint64_t>();
        split.test = in.at("test").get<std::vector<std::string>>();
        split.dev = in.at("dev").get<std::vector<std::string>>();
        for (const auto& [key, value] : in.items()) {
            if (key.starts_with("train_")) {
                split.train[std::stoull(key.substr(6))] = value.get<std::vector<std::string>>();
            }
        }
        return split;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed splits.json: ") + e.what());
    }
}

std::string case_to_json(const IndexCase& index_case) {
    ordered_json out;
    out["case_id"] = index_case.case_id;
    out["patient_id"] = index_case.patient_id;
    out["index_seq"] = index_case.index_seq;
    out["codes"] = index_case.codes;
    out["labels"] = index_case.labels;
    return out.dump();
}

IndexCase case_from_json(const std::string& line) {
    try {
        const auto in = json::parse(line);
        IndexCase index_case;
        index_case.case_id = in.at("case_id").get<std::string>();
        index_case.patient_id = in.at("patient_id").get<std::string>();
        index_case.index_seq = in.at("index_seq").get<std::uint64_t>();
        index_case.codes = in.at("codes").get<std::vector<std::string>>();
        index_case.labels = in.at("labels").get<std::map<std::string, int>>();
        return index_case;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed case record: ") + e.what());
    }
}

std::vector<IndexCase> load_cases(const std::filesystem::path& path) {
    std::vector<IndexCase> cases;
    for (const auto& line : read_lines(path)) {
        if (!trim(line).empty()) cases.push_back(case_from_json(line));
    }
    return cases;
}

} // namespace kgcot
