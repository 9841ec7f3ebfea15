#include "kgcot/entity_align.hpp"

#include <json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <mutex>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* to_string(MappingStage stage) {
    switch (stage) {
    case MappingStage::exact: return "exact";
    case MappingStage::similarity: return "similarity";
    case MappingStage::llm_validated: return "llm_validated";
    case MappingStage::llm_revised: return "llm_revised";
    case MappingStage::rejected: return "rejected";
    }
    return "rejected";
}

MappingStage mapping_stage_from_string(const std::string& text) {
    for (auto s : {MappingStage::exact, MappingStage::similarity, MappingStage::llm_validated,
                   MappingStage::llm_revised, MappingStage::rejected}) {
        if (text == to_string(s)) return s;
    }
    throw InputError("unknown mapping stage: " + text);
}

bool CandidateSet::contains(const std::string& node_id) const {
    return std::any_of(candidates.begin(), candidates.end(), [&](const Candidate& c) { return c.node_id == node_id; });
}

namespace {

double norm(const Embedding& v) {
    double sum = 0.0;
    for (double x : v) sum += x * x;
    return std::sqrt(sum);
}

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

void warn(std::vector<std::string>* sink, std::string message) {
    spdlog::warn("{}", message);
    if (sink) sink->push_back(std::move(message));
}

bool better(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.node_id < b.node_id;
}

} // namespace

double cosine(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size())
        throw ProviderError(fmt::format("embedding dimension mismatch: {} vs {}", a.size(), b.size()));
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw InputError("cosine of a zero-norm vector");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return clamp_unit(dot / (na * nb));
}

NodeEmbeddingIndex NodeEmbeddingIndex::from_vectors(const KnowledgeGraph& graph, const std::vector<Embedding>& vectors,
                                                    std::vector<std::string>* warnings) {
    if (vectors.size() != graph.node_count()) throw ProviderError("embedding count does not match node count");
    NodeEmbeddingIndex index;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const auto& id = graph.nodes()[i].id;
        const auto& v = vectors[i];
        if (index.dim_ == 0) index.dim_ = v.size();
        if (v.size() != index.dim_)
            throw ProviderError(fmt::format("embedding dimension mismatch for node {}: {} vs {}", id, v.size(), index.dim_));
        const double n = norm(v);
        if (n == 0.0) {
            warn(warnings, "zero-norm embedding for node " + id + "; excluded from retrieval");
            continue;
        }
        Embedding unit(v.size());
        for (std::size_t k = 0; k < v.size(); ++k) unit[k] = v[k] / n;
        index.ids_.push_back(id);
        index.unit_.push_back(std::move(unit));
    }
    return index;
}

NodeEmbeddingIndex NodeEmbeddingIndex::build(const KnowledgeGraph& graph, LlmGateway& gateway,
                                             std::vector<std::string>* warnings) {
    std::vector<std::string> names;
    names.reserve(graph.node_count());
    for (const auto& node : graph.nodes()) names.push_back(node.name);
    return from_vectors(graph, gateway.embed(names), warnings);
}

const Embedding* NodeEmbeddingIndex::vector_for(const std::string& node_id) const {
    const auto it = std::find(ids_.begin(), ids_.end(), node_id);
    return it == ids_.end() ? nullptr : &unit_[static_cast<std::size_t>(it - ids_.begin())];
}

std::vector<Candidate> NodeEmbeddingIndex::top(const Embedding& query, std::size_t c,
                                               const std::function<bool(const std::string&)>& keep) const {
    if (!ids_.empty() && query.size() != dim_)
        throw ProviderError(fmt::format("embedding dimension mismatch: query {} vs nodes {}", query.size(), dim_));
    const double nq = norm(query);
    if (nq == 0.0) return {};
    std::vector<Candidate> all;
    all.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (keep && !keep(ids_[i])) continue;
        double dot = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) dot += query[k] * unit_[i][k];
        all.push_back({ids_[i], clamp_unit(dot / nq)});
    }
    const auto n = std::min(c, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), better);
    all.resize(n);
    return all;
}

CandidateSet retrieve_candidates(const ConceptEntry& entry, const Embedding& entry_vector,
                                 const NodeEmbeddingIndex& index, std::size_t c) {
    return {entry, index.top(entry_vector, c)};
}

std::optional<MappingRecord> stage1_exact(const ConceptEntry& entry, const KnowledgeGraph& graph,
                                          std::vector<std::string>* warnings) {
    const auto ids = graph.nodes_named(entry.description);
    if (ids.empty()) return std::nullopt;
    MappingRecord record{entry.code, ids.front(), MappingStage::exact, 1.0, ""};
    if (ids.size() > 1) {
        record.note = fmt::format("label shared by {} nodes; lowest node_id chosen", ids.size());
        warn(warnings, fmt::format("code {}: label \"{}\" matches {} nodes; chose {}", entry.code,
                                   entry.description, ids.size(), ids.front()));
    }
    return record;
}

std::optional<MappingRecord> stage2_similarity(const CandidateSet& candidates, double tau) {
    if (candidates.candidates.empty()) return std::nullopt;
    const auto& best = candidates.candidates.front();
    if (!(best.score > tau)) return std::nullopt;
    return MappingRecord{candidates.entry.code, best.node_id, MappingStage::similarity, best.score, ""};
}

namespace {

std::optional<json> first_json_object(const std::string& reply) {
    const auto open = reply.find('{');
    const auto close = reply.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
    try {
        auto parsed = json::parse(reply.substr(open, close - open + 1));
        if (parsed.is_object()) return parsed;
    } catch (const json::exception&) {
    }
    return std::nullopt;
}

MappingRecord rejected(const std::string& code, double score, std::string note) {
    return {code, std::nullopt, MappingStage::rejected, score, std::move(note)};
}

std::string describe(const KnowledgeGraph& graph, const std::string& id) {
    const auto& node = graph.node(id);
    return node.id + " | " + node.name + " | " + node.type;
}

} // namespace

MappingRecord apply_verdict(const Provisional& provisional, const std::string& reply) {
    const auto& rec = provisional.record;
    const auto parsed = first_json_object(reply);
    if (!parsed || !parsed->contains("verdict") || !(*parsed)["verdict"].is_string())
        return rejected(rec.code, rec.score, "unparseable validation reply");
    const auto verdict = to_lower((*parsed)["verdict"].get<std::string>());
    if (verdict == "confirm") {
        return {rec.code, rec.node_id, MappingStage::llm_validated, rec.score, ""};
    }
    if (verdict == "reject") {
        std::string reason = "rejected by validator";
        if (parsed->contains("reason") && (*parsed)["reason"].is_string())
            reason = (*parsed)["reason"].get<std::string>();
        return rejected(rec.code, rec.score, reason);
    }
    if (verdict == "revise") {
        if (!parsed->contains("node_id") || !(*parsed)["node_id"].is_string())
            return rejected(rec.code, rec.score, "unparseable validation reply");
        const auto target = (*parsed)["node_id"].get<std::string>();
        if (rec.node_id && target == *rec.node_id)
            return {rec.code, rec.node_id, MappingStage::llm_validated, rec.score, "revision named the proposed node"};
        for (const auto& c : provisional.candidates.candidates) {
            if (c.node_id == target)
                return {rec.code, target, MappingStage::llm_revised, c.score, "revised from " + rec.node_id.value_or("")};
        }
        return rejected(rec.code, rec.score, "out-of-candidate revision");
    }
    return rejected(rec.code, rec.score, "unparseable validation reply");
}

std::vector<MappingRecord> stage3_validate(const std::vector<Provisional>& provisional,
                                           const KnowledgeGraph& graph, LlmGateway& gateway,
                                           const PromptTemplate& entity_select) {
    std::vector<MappingRecord> out(provisional.size());
    parallel_for(provisional.size(), gateway.max_in_flight(), [&](std::size_t i) {
        const auto& p = provisional[i];
        if (!p.record.node_id) throw InputError("stage-3 input without a provisional node: " + p.record.code);
        std::string listing;
        for (const auto& c : p.candidates.candidates) {
            if (!listing.empty()) listing += '\n';
            listing += fmt::format("- {} | {:.4f}", describe(graph, c.node_id), c.score);
        }
        if (listing.empty()) listing = "(none)";
        ChatRequest request;
        request.tag = "entity_select";
        request.messages = entity_select.render({
            {"code", p.record.code},
            {"description", p.candidates.entry.description},
            {"provisional", fmt::format("{} (cosine {:.4f})", describe(graph, *p.record.node_id), p.record.score)},
            {"candidates", listing},
        });
        try {
            out[i] = apply_verdict(p, gateway.chat(request).text);
        } catch (const ProviderError& e) {
            spdlog::warn("validation failed for code {}: {}", p.record.code, e.what());
            out[i] = rejected(p.record.code, p.record.score, std::string("provider failure: ") + e.what());
        }
    });
    return out;
}

std::string resolve_disease(const DiseaseTarget& target, const KnowledgeGraph& graph,
                            const NodeEmbeddingIndex& index, LlmGateway& gateway, double tau) {
    if (!target.node_id.empty()) {
        if (!graph.has_node(target.node_id))
            throw InputError("disease " + target.disease_id + ": node " + target.node_id + " not in graph");
        return target.node_id;
    }
    const auto is_disease = [&](const std::string& id) { return graph.node(id).type == "disease"; };
    for (const auto& id : graph.nodes_named(target.name)) {
        if (is_disease(id)) return id;
    }
    const auto query = gateway.embed({target.name}).front();
    const auto best = index.top(query, 1, is_disease);
    if (!best.empty() && best.front().score > tau) return best.front().node_id;
    throw InputError("disease " + target.disease_id + " (\"" + target.name + "\") cannot be resolved to a disease node");
}

AlignmentResult run_alignment(const Vocabulary& vocab, const KnowledgeGraph& graph, LlmGateway& gateway,
                              const PromptTemplate& entity_select, const AlignmentConfig& config) {
    AlignmentResult result;
    std::vector<ConceptEntry> entries;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (trim(vocab.description(i)).empty()) throw InputError("vocabulary code " + vocab.codes()[i] + " has an empty description");
        entries.push_back({vocab.codes()[i], vocab.description(i)});
    }

    const auto index = NodeEmbeddingIndex::build(graph, gateway, &result.warnings);

    std::vector<std::optional<MappingRecord>> slots(entries.size());
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        slots[i] = stage1_exact(entries[i], graph, &result.warnings);
        if (!slots[i]) pending.push_back(i);
    }

    std::vector<std::string> texts;
    for (auto i : pending) texts.push_back(entries[i].description);
    const auto vectors = texts.empty() ? std::vector<Embedding>{} : gateway.embed(texts);

    std::vector<CandidateSet> candidate_sets(pending.size());
    parallel_for(pending.size(), gateway.max_in_flight(), [&](std::size_t k) {
        candidate_sets[k] = retrieve_candidates(entries[pending[k]], vectors[k], index, config.candidates);
    });

    std::vector<Provisional> provisional;
    std::vector<std::size_t> provisional_slot;
    for (std::size_t k = 0; k < pending.size(); ++k) {
        const auto i = pending[k];
        const auto& set = candidate_sets[k];
        if (set.candidates.empty()) {
            warn(&result.warnings, "code " + entries[i].code + ": no retrievable candidates");
            slots[i] = rejected(entries[i].code, 0.0, "no candidates");
            continue;
        }
        if (auto rec = stage2_similarity(set, config.tau)) {
            provisional.push_back({*rec, set});
            provisional_slot.push_back(i);
        } else {
            slots[i] = rejected(entries[i].code, set.candidates.front().score,
                                fmt::format("best cosine {:.4f} not above threshold", set.candidates.front().score));
        }
    }

    if (config.validate) {
        const auto validated = stage3_validate(provisional, graph, gateway, entity_select);
        for (std::size_t k = 0; k < validated.size(); ++k) slots[provisional_slot[k]] = validated[k];
    } else {
        for (std::size_t k = 0; k < provisional.size(); ++k) slots[provisional_slot[k]] = provisional[k].record;
    }

    for (auto s : {MappingStage::exact, MappingStage::similarity, MappingStage::llm_validated,
                   MappingStage::llm_revised, MappingStage::rejected}) {
        result.stage_counts[to_string(s)] = 0;
    }
    for (auto& rec : slots) {
        ++result.stage_counts[to_string(rec->stage)];
        result.records.push_back(std::move(*rec));
    }

    for (const auto& target : config.diseases) {
        result.disease_nodes[target.disease_id] = resolve_disease(target, graph, index, gateway, config.tau);
    }
    return result;
}

std::string mapping_to_jsonl(const std::vector<MappingRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        ordered_json j;
        j["code"] = r.code;
        j["node_id"] = r.node_id ? json(*r.node_id) : json(nullptr);
        j["stage"] = to_string(r.stage);
        j["score"] = r.score;
        j["note"] = r.note;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<MappingRecord> mapping_from_jsonl(const std::string& text) {
    std::vector<MappingRecord> records;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const auto line = trim(std::string_view(text).substr(start, end - start));
        start = end + 1;
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            MappingRecord r;
            r.code = j.at("code").get<std::string>();
            if (!j.at("node_id").is_null()) r.node_id = j.at("node_id").get<std::string>();
            r.stage = mapping_stage_from_string(j.at("stage").get<std::string>());
            r.score = j.at("score").get<double>();
            r.note = j.value("note", "");
            if (r.node_id.has_value() == (r.stage == MappingStage::rejected))
                throw InputError("node_id must be null exactly when stage is rejected");
            records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw InputError(fmt::format("mapping line {}: {}", line_no, e.what()));
        } catch (const InputError& e) {
            throw InputError(fmt::format("mapping line {}: {}", line_no, e.what()));
        }
    }
    return records;
}

std::vector<MappingRecord> load_mapping(const std::filesystem::path& path) {
    return mapping_from_jsonl(read_file(path));
}

std::string alignment_summary_json(const AlignmentResult& result) {
    ordered_json j;
    j["total"] = result.records.size();
    j["stages"] = ordered_json::object();
    for (const auto& [stage, count] : result.stage_counts) j["stages"][stage] = count;
    j["diseases"] = ordered_json::object();
    for (const auto& [id, node] : result.disease_nodes) j["diseases"][id] = node;
    j["warnings"] = result.warnings;
    return j.dump(2) + "\n";
}

} // namespace kgcot
