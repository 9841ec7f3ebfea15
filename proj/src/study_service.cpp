#include "kgcot/study_service.hpp"

#include "kgcot/common.hpp"

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <set>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::vector<SystemOutput> load_system_outputs(const std::filesystem::path& path) {
    std::vector<SystemOutput> out;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const auto j = json::parse(line);
            SystemOutput o;
            o.unit_id = j.at("unit_id").get<std::string>();
            o.input_summary = j.at("input_summary").get<std::string>();
            o.ground_truth = j.at("ground_truth").get<int>();
            o.prediction = j.at("prediction").get<std::string>();
            o.trace = j.at("trace").get<std::string>();
            if (o.ground_truth != 0 && o.ground_truth != 1) throw InputError("ground_truth must be 0 or 1");
            if (!seen.insert(o.unit_id).second) throw InputError("duplicate unit_id " + o.unit_id);
            out.push_back(std::move(o));
        } catch (const json::exception& e) {
            throw InputError(fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
        } catch (const InputError& e) {
            throw InputError(fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
        }
    }
    return out;
}

const ComparisonCase* Study::find(const std::string& comparison_id) const {
    const auto it = std::lower_bound(comparisons.begin(), comparisons.end(), comparison_id,
                                     [](const ComparisonCase& c, const std::string& id) { return c.comparison_id < id; });
    return it != comparisons.end() && it->comparison_id == comparison_id ? &*it : nullptr;
}

int side_a_system(std::uint64_t seed, const std::string& unit_id) {
    SplitMix64 rng(seed ^ fnv1a64(unit_id));
    return (rng.next() >> 63) == 0 ? 1 : 2;
}

Study build_study(const std::vector<SystemOutput>& system1, const std::vector<SystemOutput>& system2,
                  std::uint64_t seed, std::string system1_name, std::string system2_name) {
    if (system1_name == system2_name) throw InputError("the two systems need distinct names");
    std::map<std::string, const SystemOutput*> by_id1, by_id2;
    for (const auto& o : system1) by_id1[o.unit_id] = &o;
    for (const auto& o : system2) by_id2[o.unit_id] = &o;
    for (const auto& [id, _] : by_id1) {
        if (!by_id2.count(id)) throw InputError("unit " + id + " is missing from the second system's outputs");
    }
    for (const auto& [id, _] : by_id2) {
        if (!by_id1.count(id)) throw InputError("unit " + id + " is missing from the first system's outputs");
    }

    Study study;
    study.seed = seed;
    study.system1_name = std::move(system1_name);
    study.system2_name = std::move(system2_name);
    std::size_t n = 0;
    for (const auto& [id, o1] : by_id1) {
        const auto* o2 = by_id2.at(id);
        if (o1->ground_truth != o2->ground_truth) throw InputError("unit " + id + " has conflicting ground truth");
        ComparisonCase c;
        c.comparison_id = fmt::format("cmp-{:04d}", ++n);
        c.unit_id = id;
        c.input_summary = o1->input_summary;
        c.ground_truth = o1->ground_truth;
        c.system_on_a = side_a_system(seed, id);
        const ComparisonSide s1{o1->prediction, o1->trace}, s2{o2->prediction, o2->trace};
        c.side_a = c.system_on_a == 1 ? s1 : s2;
        c.side_b = c.system_on_a == 1 ? s2 : s1;
        study.comparisons.push_back(std::move(c));
    }
    return study;
}

ordered_json study_to_json(const Study& study) {
    ordered_json j;
    j["seed"] = study.seed;
    j["systems"] = {study.system1_name, study.system2_name};
    j["allow_ties"] = study.allow_ties;
    j["comparisons"] = ordered_json::array();
    for (const auto& c : study.comparisons) {
        j["comparisons"].push_back({{"comparison_id", c.comparison_id},
                                    {"unit_id", c.unit_id},
                                    {"input_summary", c.input_summary},
                                    {"ground_truth", c.ground_truth},
                                    {"side_a", {{"prediction", c.side_a.prediction}, {"trace", c.side_a.trace}}},
                                    {"side_b", {{"prediction", c.side_b.prediction}, {"trace", c.side_b.trace}}},
                                    {"system_on_a", c.system_on_a}});
    }
    return j;
}

Study study_from_json(const json& j) {
    Study s;
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto systems = j.at("systems");
    if (!systems.is_array() || systems.size() != 2) throw InputError("study systems must list two names");
    s.system1_name = systems[0].get<std::string>();
    s.system2_name = systems[1].get<std::string>();
    s.allow_ties = j.value("allow_ties", false);
    for (const auto& c : j.at("comparisons")) {
        ComparisonCase cc;
        cc.comparison_id = c.at("comparison_id").get<std::string>();
        cc.unit_id = c.at("unit_id").get<std::string>();
        cc.input_summary = c.at("input_summary").get<std::string>();
        cc.ground_truth = c.at("ground_truth").get<int>();
        cc.side_a = {c.at("side_a").at("prediction").get<std::string>(), c.at("side_a").at("trace").get<std::string>()};
        cc.side_b = {c.at("side_b").at("prediction").get<std::string>(), c.at("side_b").at("trace").get<std::string>()};
        cc.system_on_a = c.at("system_on_a").get<int>();
        if (cc.system_on_a != 1 && cc.system_on_a != 2) throw InputError("system_on_a must be 1 or 2");
        s.comparisons.push_back(std::move(cc));
    }
    if (!std::is_sorted(s.comparisons.begin(), s.comparisons.end(),
                        [](const auto& a, const auto& b) { return a.comparison_id < b.comparison_id; }))
        throw InputError("study comparisons are not in id order");
    return s;
}

void save_study(const Study& study, const std::filesystem::path& path) {
    write_file_atomic(path, study_to_json(study).dump(2) + "\n");
    std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                                 std::filesystem::perm_options::replace);
}

Study load_study(const std::filesystem::path& path) {
    try {
        return study_from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

const char* to_string(Dimension dimension) {
    switch (dimension) {
    case Dimension::clarity_coherence: return "clarity_coherence";
    case Dimension::coverage_relevance: return "coverage_relevance";
    case Dimension::correctness_soundness: return "correctness_soundness";
    }
    return "?";
}

std::optional<Dimension> dimension_from_string(const std::string& text) {
    for (auto d : kDimensions) {
        if (text == to_string(d)) return d;
    }
    return std::nullopt;
}

PreferenceRecord preference_from_json(const json& j, const Study& study) {
    if (!j.is_object()) throw InputError("preference must be a JSON object");
    auto text = [&](const char* key) {
        if (!j.contains(key) || !j[key].is_string()) throw InputError(std::string("missing string field ") + key);
        return j[key].get<std::string>();
    };
    PreferenceRecord r;
    r.comparison_id = text("comparison_id");
    r.annotator_id = text("annotator_id");
    if (trim(r.annotator_id).empty()) throw InputError("annotator_id is empty");
    if (!study.find(r.comparison_id)) throw InputError("unknown comparison_id " + r.comparison_id);
    const auto dim = dimension_from_string(text("dimension"));
    if (!dim) throw InputError("invalid dimension " + j["dimension"].get<std::string>());
    r.dimension = *dim;
    r.choice = text("choice");
    if (r.choice != "A" && r.choice != "B" && !(study.allow_ties && r.choice == "tie"))
        throw InputError("invalid choice " + r.choice);
    r.timestamp = j.contains("timestamp") && j["timestamp"].is_string() ? j["timestamp"].get<std::string>() : "";
    return r;
}

std::string preference_to_jsonl(const PreferenceRecord& record) {
    ordered_json j;
    j["comparison_id"] = record.comparison_id;
    j["annotator_id"] = record.annotator_id;
    j["dimension"] = to_string(record.dimension);
    j["choice"] = record.choice;
    j["timestamp"] = record.timestamp;
    return j.dump() + "\n";
}

namespace {

void count(DimensionTally& t, const ComparisonCase& c, const std::string& choice) {
    if (choice == "tie") {
        ++t.ties;
        return;
    }
    const int picked = choice == "A" ? c.system_on_a : 3 - c.system_on_a;
    ++t.annotated;
    (picked == 1 ? t.wins1 : t.wins2)++;
}

ordered_json tally_json(const std::map<Dimension, DimensionTally>& tallies, const Study& study) {
    ordered_json out = ordered_json::object();
    for (auto d : kDimensions) {
        const auto it = tallies.find(d);
        const DimensionTally t = it == tallies.end() ? DimensionTally{} : it->second;
        ordered_json dj;
        dj["annotated"] = t.annotated;
        dj["wins"] = {{study.system1_name, t.wins1}, {study.system2_name, t.wins2}};
        dj["ties"] = t.ties;
        ordered_json rate = ordered_json::object(), percent = ordered_json::object();
        for (int s : {1, 2}) {
            const auto& name = s == 1 ? study.system1_name : study.system2_name;
            const auto r = win_rate(t, s);
            rate[name] = r ? ordered_json(*r) : ordered_json(nullptr);
            percent[name] = r ? ordered_json(std::round(*r * 10000.0) / 100.0) : ordered_json(nullptr);
        }
        dj["rate"] = std::move(rate);
        dj["percent"] = std::move(percent);
        out[to_string(d)] = std::move(dj);
    }
    return out;
}

} // namespace

StudyReport tally(const Study& study, const std::map<PreferenceKey, PreferenceRecord>& latest) {
    StudyReport report;
    report.comparisons = study.comparisons.size();
    for (auto d : kDimensions) report.pooled[d];
    for (const auto& [key, r] : latest) {
        const auto* c = study.find(r.comparison_id);
        if (!c) throw InputError("preference refers to unknown comparison " + r.comparison_id);
        ++report.records;
        count(report.pooled[r.dimension], *c, r.choice);
        count(report.per_annotator[r.annotator_id][r.dimension], *c, r.choice);
    }
    for (const auto& [d, t] : report.pooled) {
        if (t.annotated == 0) report.flags.push_back(std::string("rate_undefined:") + to_string(d));
    }
    return report;
}

std::optional<double> win_rate(const DimensionTally& t, int system) {
    if (t.annotated == 0) return std::nullopt;
    return static_cast<double>(system == 1 ? t.wins1 : t.wins2) / static_cast<double>(t.annotated);
}

ordered_json report_to_json(const StudyReport& report, const Study& study) {
    ordered_json j;
    j["systems"] = {study.system1_name, study.system2_name};
    j["comparisons"] = report.comparisons;
    j["records"] = report.records;
    j["pooled"] = tally_json(report.pooled, study);
    j["per_annotator"] = ordered_json::object();
    for (const auto& [annotator, tallies] : report.per_annotator) j["per_annotator"][annotator] = tally_json(tallies, study);
    j["flags"] = report.flags;
    return j;
}

std::map<PreferenceKey, PreferenceRecord> replay(const Study& study, const std::filesystem::path& log_path) {
    std::map<PreferenceKey, PreferenceRecord> latest;
    if (!std::filesystem::exists(log_path)) return latest;
    std::size_t line_no = 0;
    for (const auto& line : read_lines(log_path)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            auto r = preference_from_json(json::parse(line), study);
            PreferenceKey key{r.comparison_id, r.annotator_id, r.dimension};
            latest[key] = std::move(r);
        } catch (const json::exception& e) {
            throw InputError(fmt::format("{} line {}: {}", log_path.string(), line_no, e.what()));
        } catch (const InputError& e) {
            throw InputError(fmt::format("{} line {}: {}", log_path.string(), line_no, e.what()));
        }
    }
    return latest;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    return fmt::format("{}.{:03d}Z", buf, ms);
}

StudyState::StudyState(Study study, std::filesystem::path log_path)
    : study_(std::move(study)), log_path_(std::move(log_path)) {
    latest_ = replay(study_, log_path_);
    if (std::filesystem::exists(log_path_)) {
        for (const auto& line : read_lines(log_path_)) log_lines_ += !trim(line).empty();
    }
}

std::optional<ordered_json> StudyState::next_case(const std::string& annotator_id) const {
    std::shared_lock lock(mutex_);
    std::size_t finished = 0;
    const ComparisonCase* next = nullptr;
    for (const auto& c : study_.comparisons) {
        const bool complete = std::all_of(std::begin(kDimensions), std::end(kDimensions), [&](Dimension d) {
            return latest_.count(PreferenceKey{c.comparison_id, annotator_id, d}) > 0;
        });
        if (complete) ++finished;
        else if (!next) next = &c;
    }
    if (!next) return std::nullopt;
    ordered_json j;
    j["done"] = false;
    j["comparison_id"] = next->comparison_id;
    j["input_summary"] = next->input_summary;
    j["ground_truth"] = next->ground_truth;
    j["A"] = {{"prediction", next->side_a.prediction}, {"trace", next->side_a.trace}};
    j["B"] = {{"prediction", next->side_b.prediction}, {"trace", next->side_b.trace}};
    j["dimensions"] = ordered_json::array();
    for (auto d : kDimensions) j["dimensions"].push_back(to_string(d));
    j["choices"] = study_.allow_ties ? ordered_json{"A", "B", "tie"} : ordered_json{"A", "B"};
    j["progress"] = {{"completed", finished}, {"total", study_.comparisons.size()}};
    return j;
}

ordered_json StudyState::done_payload(const std::string& annotator_id) const {
    (void)annotator_id;
    std::shared_lock lock(mutex_);
    return {{"done", true}, {"progress", {{"completed", study_.comparisons.size()}, {"total", study_.comparisons.size()}}}};
}

void StudyState::apply(const PreferenceRecord& record) {
    latest_[PreferenceKey{record.comparison_id, record.annotator_id, record.dimension}] = record;
}

void StudyState::record(const std::vector<PreferenceRecord>& records) {
    std::unique_lock lock(mutex_);
    std::string payload;
    for (const auto& r : records) payload += preference_to_jsonl(r);
    if (payload.empty()) return;
    const int fd = ::open(log_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600);
    if (fd < 0) throw InputError("cannot open " + log_path_.string() + ": " + std::strerror(errno));
    std::size_t written = 0;
    while (written < payload.size()) {
        const auto n = ::write(fd, payload.data() + written, payload.size() - written);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string err = std::strerror(errno);
            ::close(fd);
            throw InputError("write to " + log_path_.string() + " failed: " + err);
        }
        written += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    for (const auto& r : records) apply(r);
    log_lines_ += records.size();
}

StudyReport StudyState::report() const {
    std::shared_lock lock(mutex_);
    return tally(study_, latest_);
}

std::string StudyState::export_log() const {
    std::shared_lock lock(mutex_);
    return std::filesystem::exists(log_path_) ? read_file(log_path_) : std::string();
}

std::size_t StudyState::log_lines() const {
    std::shared_lock lock(mutex_);
    return log_lines_;
}

} // namespace kgcot
