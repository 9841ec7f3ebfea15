#include "kgcot/cot_forge.hpp"

#include <json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <regex>
#include <set>
#include <tuple>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* to_string(Conclusion conclusion) {
    switch (conclusion) {
    case Conclusion::yes: return "yes";
    case Conclusion::no: return "no";
    case Conclusion::unparseable: return "unparseable";
    }
    return "unparseable";
}

const char* to_string(UnitStatus status) {
    switch (status) {
    case UnitStatus::kept: return "kept";
    case UnitStatus::dropped_mismatch: return "dropped_mismatch";
    case UnitStatus::dropped_unparseable: return "dropped_unparseable";
    case UnitStatus::failed: return "failed";
    }
    return "failed";
}

Conclusion parse_conclusion(const std::string& text) {
    static const std::regex anchored(R"(^\s*conclusion\s*:\s*(yes|no)\s*[[:punct:]]*\s*$)", std::regex::icase);
    static const std::regex token(R"(\b(yes|no)\b)", std::regex::icase);

    std::string last_line;
    std::size_t end = text.size();
    while (end > 0) {
        const auto start = text.rfind('\n', end - 1);
        const auto begin = start == std::string::npos ? 0 : start + 1;
        const auto line = trim(std::string_view(text).substr(begin, end - begin));
        if (!line.empty()) {
            last_line = line;
            break;
        }
        if (start == std::string::npos) break;
        end = start;
    }
    std::smatch m;
    if (std::regex_match(last_line, m, anchored)) return to_lower(m[1].str()) == "yes" ? Conclusion::yes : Conclusion::no;

    const std::string tail = text.size() > 200 ? text.substr(text.size() - 200) : text;
    std::string found;
    for (auto it = std::sregex_iterator(tail.begin(), tail.end(), token); it != std::sregex_iterator(); ++it)
        found = (*it)[1].str();
    if (found.empty()) return Conclusion::unparseable;
    return to_lower(found) == "yes" ? Conclusion::yes : Conclusion::no;
}

namespace {

std::map<std::string, std::set<std::string>> nodes_by_code(const std::vector<MappingRecord>& mapping) {
    std::map<std::string, std::set<std::string>> out;
    for (const auto& r : mapping) {
        if (r.node_id) out[r.code].insert(*r.node_id);
    }
    return out;
}

std::string bullet_list(const std::vector<std::string>& items) {
    if (items.empty()) return "- (none)";
    std::string out;
    for (const auto& item : items) {
        if (!out.empty()) out += '\n';
        out += "- " + item;
    }
    return out;
}

} // namespace

RelevancePartition partition_relevance(const IndexCase& index_case, const DiseaseEvidence& evidence,
                                       const std::vector<MappingRecord>& mapping) {
    const auto by_code = nodes_by_code(mapping);
    std::set<std::string> expressed;
    for (const auto& code : index_case.codes) {
        if (const auto it = by_code.find(code); it != by_code.end()) expressed.insert(it->second.begin(), it->second.end());
    }
    RelevancePartition out;
    for (const auto& member : evidence.relevance.members) {
        (expressed.contains(member) ? out.present : out.absent).push_back(member);
    }
    return out;
}

CotContext build_context(const IndexCase& index_case, const DiseaseEvidence& evidence,
                         const std::vector<MappingRecord>& mapping, const Vocabulary& vocab,
                         const KnowledgeGraph& graph) {
    CotContext ctx;
    ctx.case_id = index_case.case_id;
    ctx.disease_id = evidence.disease_id;
    ctx.disease_name = graph.node(evidence.disease_node).name;
    ctx.codes = index_case.codes;
    const auto label = index_case.labels.find(evidence.disease_id);
    if (label == index_case.labels.end())
        throw InputError("case " + index_case.case_id + " has no label for disease " + evidence.disease_id);
    ctx.ground_truth = label->second;

    const auto by_code = nodes_by_code(mapping);
    const std::set<std::string> members(evidence.relevance.members.begin(), evidence.relevance.members.end());
    std::vector<std::string> linked, other;
    for (const auto& code : index_case.codes) {
        auto text = vocab.index_of(code) ? vocab.description_of(code) : code;
        bool is_linked = false;
        if (const auto it = by_code.find(code); it != by_code.end()) {
            for (const auto& node : it->second) is_linked = is_linked || members.contains(node);
        }
        (is_linked ? linked : other).push_back(std::move(text));
    }
    ctx.codes_present = std::move(linked);
    ctx.codes_present.insert(ctx.codes_present.end(), other.begin(), other.end());

    const auto part = partition_relevance(index_case, evidence, mapping);
    for (const auto& id : part.present) ctx.relevance_present.push_back(graph.node(id).name);
    for (const auto& id : part.absent) ctx.relevance_absent.push_back(graph.node(id).name);
    for (const auto& p : evidence.paths) ctx.paths.push_back(render_path(p, graph));
    return ctx;
}

std::string label_line(int ground_truth) {
    return std::string("Ground-truth next-visit outcome: ") + (ground_truth ? "Yes" : "No");
}

std::vector<ChatMessage> render_prompt(const CotContext& ctx, const PromptTemplate& cot_gen, bool include_label,
                                       bool include_absent) {
    auto codes = bullet_list(ctx.codes_present);
    if (ctx.codes_omitted > 0) codes += fmt::format("\n- ({} further diagnoses omitted)", ctx.codes_omitted);
    std::string absent;
    if (include_absent) {
        absent = "\nDisease-relevant knowledge-graph nodes absent at the index visit:\n" + bullet_list(ctx.relevance_absent);
    }
    return cot_gen.render({
        {"disease_name", ctx.disease_name},
        {"codes_present", codes},
        {"relevance_present", bullet_list(ctx.relevance_present)},
        {"relevance_absent_block", absent},
        {"paths", bullet_list(ctx.paths)},
        {"label_line", include_label ? label_line(ctx.ground_truth) : ""},
    });
}

namespace {

std::size_t rendered_size(const CotContext& ctx, const PromptTemplate& cot_gen) {
    std::size_t total = 0;
    for (const auto& m : render_prompt(ctx, cot_gen, true, true)) total += m.content.size();
    return total;
}

} // namespace

std::size_t fit_budget(CotContext& ctx, const PromptTemplate& cot_gen, std::size_t budget) {
    std::size_t dropped = 0;
    while (!ctx.codes_present.empty() && rendered_size(ctx, cot_gen) > budget) {
        ctx.codes_present.pop_back();
        ++ctx.codes_omitted;
        ++dropped;
    }
    return dropped;
}

void CotCounts::add(UnitStatus status) {
    ++generated;
    switch (status) {
    case UnitStatus::kept: ++kept; break;
    case UnitStatus::dropped_mismatch: ++dropped_mismatch; break;
    case UnitStatus::dropped_unparseable: ++dropped_unparseable; break;
    case UnitStatus::failed: ++failed; break;
    }
}

CotRun generate_and_filter(const std::vector<IndexCase>& cases, const std::map<std::string, DiseaseEvidence>& evidence,
                           const std::vector<MappingRecord>& mapping, const Vocabulary& vocab,
                           const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& cot_gen,
                           const CotConfig& config) {
    if (evidence.empty()) throw InputError("no disease evidence supplied");
    std::vector<std::pair<const IndexCase*, const DiseaseEvidence*>> work;
    for (const auto& c : cases) {
        for (const auto& [disease_id, ev] : evidence) work.push_back({&c, &ev});
    }
    std::sort(work.begin(), work.end(), [](const auto& a, const auto& b) {
        return std::tie(a.first->case_id, a.second->disease_id) < std::tie(b.first->case_id, b.second->disease_id);
    });

    CotRun run;
    run.units.resize(work.size());
    // Contexts are built up front so label problems surface before any provider call.
    std::vector<CotContext> contexts;
    contexts.reserve(work.size());
    for (std::size_t i = 0; i < work.size(); ++i) {
        auto ctx = build_context(*work[i].first, *work[i].second, mapping, vocab, graph);
        auto& unit = run.units[i];
        unit.codes_truncated = fit_budget(ctx, cot_gen, config.prompt_char_budget);
        if (unit.codes_truncated > 0 && rendered_size(ctx, cot_gen) > config.prompt_char_budget)
            spdlog::warn("{} / {}: prompt exceeds the budget even without diagnoses", ctx.case_id, ctx.disease_id);
        unit.case_id = ctx.case_id;
        unit.disease_id = ctx.disease_id;
        unit.sample_id = ctx.case_id + "/" + ctx.disease_id;
        unit.label = ctx.ground_truth;
        contexts.push_back(std::move(ctx));
    }

    parallel_for(work.size(), gateway.max_in_flight(), [&](std::size_t i) {
        const auto& ctx = contexts[i];
        auto& unit = run.units[i];
        ChatRequest request;
        request.tag = "cot_gen";
        request.temperature = config.temperature;
        request.max_output = config.max_output;
        request.messages = render_prompt(ctx, cot_gen, true, true);
        try {
            unit.trace = gateway.chat(request).text;
        } catch (const ProviderError& e) {
            unit.status = UnitStatus::failed;
            unit.error = e.what();
            if (config.fail_fast) throw;
            spdlog::warn("generation failed for {}: {}", unit.sample_id, e.what());
            return;
        }
        unit.conclusion = parse_conclusion(unit.trace);
        if (unit.conclusion == Conclusion::unparseable) unit.status = UnitStatus::dropped_unparseable;
        else if ((unit.conclusion == Conclusion::yes) == (unit.label == 1)) unit.status = UnitStatus::kept;
        else unit.status = UnitStatus::dropped_mismatch;
        unit.messages = render_prompt(ctx, cot_gen, false, config.include_absent);
        unit.messages.push_back({Role::assistant, unit.trace});
    });

    for (const auto& unit : run.units) {
        run.totals.add(unit.status);
        run.per_disease[unit.disease_id].add(unit.status);
    }
    run.provenance = {{"provider", gateway.provider_id()}, {"model", gateway.model()}, {"cot_gen", cot_gen.label()}};
    return run;
}

namespace {

ordered_json messages_json(const std::vector<ChatMessage>& messages) {
    ordered_json out = ordered_json::array();
    for (const auto& m : messages) {
        ordered_json j;
        j["role"] = to_string(m.role);
        j["content"] = m.content;
        out.push_back(std::move(j));
    }
    return out;
}

ordered_json counts_json(const CotCounts& c) {
    ordered_json j;
    j["generated"] = c.generated;
    j["kept"] = c.kept;
    j["dropped_mismatch"] = c.dropped_mismatch;
    j["dropped_unparseable"] = c.dropped_unparseable;
    j["failed"] = c.failed;
    return j;
}

} // namespace

std::string corpus_jsonl(const CotRun& run) {
    std::string out;
    for (const auto& u : run.units) {
        if (u.status != UnitStatus::kept) continue;
        ordered_json j;
        j["sample_id"] = u.sample_id;
        j["case_id"] = u.case_id;
        j["disease_id"] = u.disease_id;
        j["messages"] = messages_json(u.messages);
        j["label"] = u.label;
        j["conclusion"] = to_string(u.conclusion);
        out += j.dump() + "\n";
    }
    return out;
}

std::string generations_jsonl(const CotRun& run) {
    std::string out;
    for (const auto& u : run.units) {
        ordered_json j;
        j["sample_id"] = u.sample_id;
        j["case_id"] = u.case_id;
        j["disease_id"] = u.disease_id;
        j["label"] = u.label;
        j["conclusion"] = to_string(u.conclusion);
        j["status"] = to_string(u.status);
        j["trace"] = u.trace;
        if (!u.error.empty()) j["error"] = u.error;
        if (u.codes_truncated > 0) j["codes_truncated"] = u.codes_truncated;
        out += j.dump() + "\n";
    }
    return out;
}

std::string cot_report_json(const CotRun& run) {
    auto j = counts_json(run.totals);
    j["per_disease"] = ordered_json::object();
    for (const auto& [disease, counts] : run.per_disease) j["per_disease"][disease] = counts_json(counts);
    j["provenance"] = ordered_json::object();
    for (const auto& [k, v] : run.provenance) j["provenance"][k] = v;
    return j.dump(2) + "\n";
}

} // namespace kgcot
