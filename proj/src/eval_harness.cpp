#include "kgcot/eval_harness.hpp"

#include <json.hpp>
#include <spdlog/fmt/fmt.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void check_lengths(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw InputError(fmt::format("scores and labels differ in length ({} vs {})", scores.size(), labels.size()));
}

std::optional<double> mean(const std::vector<double>& values) {
    if (values.empty()) return std::nullopt;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

} // namespace

std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_lengths(scores, labels);
    const auto n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    // Mid-ranks (1-based) for tied groups.
    double positive_rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                positive_rank_sum += mid;
                ++pos;
            }
        }
        i = j;
    }
    const auto neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

std::optional<double> aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_lengths(scores, labels);
    const auto n = scores.size();
    const auto positives = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int y) { return y != 0; }));
    if (positives == 0) return std::nullopt;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    double ap = 0.0, previous_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? tp : fp)++;
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - previous_recall) * precision;
        previous_recall = recall;
        i = j;
    }
    return ap;
}

double derive_probability(Conclusion conclusion, const std::optional<std::vector<TokenScore>>& token_scores,
                          std::string* method) {
    std::optional<double> lp_yes, lp_no;
    if (token_scores) {
        for (const auto& t : *token_scores) {
            std::string key;
            for (char c : to_lower(t.token)) {
                if (std::isalpha(static_cast<unsigned char>(c))) key.push_back(c);
            }
            if (key == "yes" && !lp_yes) lp_yes = t.logprob;
            if (key == "no" && !lp_no) lp_no = t.logprob;
        }
    }
    auto set_method = [&](const char* m) {
        if (method) *method = m;
    };
    if (lp_yes && lp_no && std::isinf(*lp_yes) && std::isinf(*lp_no) && *lp_yes < 0 && *lp_no < 0) {
        lp_yes.reset();
        lp_no.reset();
    }
    if (lp_yes && lp_no) {
        set_method("token_scores");
        const double m = std::max(*lp_yes, *lp_no);
        const double ey = std::exp(*lp_yes - m), en = std::exp(*lp_no - m);
        return ey / (ey + en);
    }
    if (lp_yes) {
        set_method("token_scores_partial");
        return std::clamp(std::exp(*lp_yes), 0.0, 1.0);
    }
    if (lp_no) {
        set_method("token_scores_partial");
        return std::clamp(1.0 - std::exp(*lp_no), 0.0, 1.0);
    }
    set_method("verdict");
    switch (conclusion) {
    case Conclusion::yes: return 1.0;
    case Conclusion::no: return 0.0;
    case Conclusion::unparseable: return 0.5;
    }
    return 0.5;
}

LabelIndex label_index(const std::vector<IndexCase>& cases) {
    LabelIndex out;
    for (const auto& c : cases) {
        for (const auto& [disease, y] : c.labels) out[{c.case_id, disease}] = y;
    }
    return out;
}

MetricReport classify_and_score(const std::vector<PredictionRecord>& records, const LabelIndex& labels,
                                double threshold) {
    MetricReport report;
    report.threshold = threshold;
    report.records = records.size();

    struct Column {
        std::vector<double> scores;
        std::vector<int> labels;
        std::vector<int> predicted;
    };
    std::map<std::string, Column> columns;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : records) {
        const std::pair key{r.case_id, r.disease_id};
        if (!seen.insert(key).second)
            throw InputError("duplicate prediction for case " + r.case_id + ", disease " + r.disease_id);
        const auto it = labels.find(key);
        if (it == labels.end()) throw InputError("no label for case " + r.case_id + ", disease " + r.disease_id);
        if (!(r.probability >= 0.0 && r.probability <= 1.0))
            throw InputError("probability outside [0, 1] for case " + r.case_id);
        auto& col = columns[r.disease_id];
        col.scores.push_back(r.probability);
        col.labels.push_back(it->second ? 1 : 0);
        col.predicted.push_back(r.verdict ? (*r.verdict ? 1 : 0) : (r.probability >= threshold ? 1 : 0));
    }

    std::vector<double> accs, aurocs, auprs, f1s;
    for (const auto& [disease, col] : columns) {
        DiseaseMetrics m;
        std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
        for (std::size_t i = 0; i < col.labels.size(); ++i) {
            const int y = col.labels[i], yhat = col.predicted[i];
            correct += y == yhat;
            tp += y && yhat;
            fp += !y && yhat;
            fn += y && !yhat;
            (y ? m.support_pos : m.support_neg)++;
        }
        m.accuracy = static_cast<double>(correct) / static_cast<double>(col.labels.size());
        m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        m.auroc = auroc(col.scores, col.labels);
        m.aupr = aupr(col.scores, col.labels);
        if (!m.auroc) report.flags.push_back("auroc_undefined:" + disease);
        if (!m.aupr) report.flags.push_back("aupr_undefined:" + disease);
        accs.push_back(m.accuracy);
        f1s.push_back(m.f1);
        if (m.auroc) aurocs.push_back(*m.auroc);
        if (m.aupr) auprs.push_back(*m.aupr);
        report.per_disease[disease] = m;
    }
    report.macro = {mean(accs), mean(aurocs), mean(auprs), mean(f1s)};
    return report;
}

PredictionRecord prediction_from_json(const std::string& line) {
    const auto j = json::parse(line);
    PredictionRecord r;
    r.case_id = j.at("case_id").get<std::string>();
    r.disease_id = j.at("disease_id").get<std::string>();
    if (j.contains("verdict") && !j["verdict"].is_null()) {
        const auto v = to_lower(j["verdict"].get<std::string>());
        if (v != "yes" && v != "no") throw InputError("verdict must be \"yes\" or \"no\"");
        r.verdict = v == "yes";
    }
    if (j.contains("trace") && !j["trace"].is_null()) r.trace = j["trace"].get<std::string>();
    if (j.contains("probability") && !j["probability"].is_null()) {
        r.probability = j["probability"].get<double>();
        r.method = "given";
    } else {
        std::optional<std::vector<TokenScore>> scores;
        if (j.contains("token_scores")) {
            scores.emplace();
            for (const auto& t : j["token_scores"])
                scores->push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
        }
        Conclusion conclusion = Conclusion::unparseable;
        if (r.trace) conclusion = parse_conclusion(*r.trace);
        else if (r.verdict) conclusion = *r.verdict ? Conclusion::yes : Conclusion::no;
        else if (!scores) throw InputError("prediction needs a probability, a trace, a verdict or token scores");
        r.probability = derive_probability(conclusion, scores, &r.method);
        if (!r.verdict && conclusion != Conclusion::unparseable) r.verdict = conclusion == Conclusion::yes;
    }
    return r;
}

std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path) {
    std::vector<PredictionRecord> out;
    std::size_t line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            out.push_back(prediction_from_json(line));
        } catch (const json::exception& e) {
            throw InputError(fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
        } catch (const InputError& e) {
            throw InputError(fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
        }
    }
    return out;
}

namespace {

ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::string optional_csv(const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : ""; }

} // namespace

std::string metrics_json(const MetricReport& report) {
    ordered_json j;
    j["threshold"] = report.threshold;
    j["records"] = report.records;
    j["per_disease"] = ordered_json::object();
    for (const auto& [disease, m] : report.per_disease) {
        ordered_json d;
        d["accuracy"] = m.accuracy;
        d["auroc"] = optional_json(m.auroc);
        d["aupr"] = optional_json(m.aupr);
        d["precision"] = m.precision;
        d["recall"] = m.recall;
        d["f1"] = m.f1;
        d["support_pos"] = m.support_pos;
        d["support_neg"] = m.support_neg;
        j["per_disease"][disease] = std::move(d);
    }
    j["macro"] = {{"accuracy", optional_json(report.macro.accuracy)},
                  {"auroc", optional_json(report.macro.auroc)},
                  {"aupr", optional_json(report.macro.aupr)},
                  {"f1", optional_json(report.macro.f1)}};
    j["flags"] = report.flags;
    return j.dump(2) + "\n";
}

std::string metrics_csv(const MetricReport& report) {
    std::string out = "disease_id,accuracy,auroc,aupr,f1,support_pos,support_neg\n";
    for (const auto& [disease, m] : report.per_disease) {
        out += fmt::format("{},{:.6f},{},{},{:.6f},{},{}\n", disease, m.accuracy, optional_csv(m.auroc), optional_csv(m.aupr),
                           m.f1, m.support_pos, m.support_neg);
    }
    out += fmt::format("macro,{},{},{},{},,\n", optional_csv(report.macro.accuracy), optional_csv(report.macro.auroc),
                       optional_csv(report.macro.aupr), optional_csv(report.macro.f1));
    return out;
}

} // namespace kgcot
