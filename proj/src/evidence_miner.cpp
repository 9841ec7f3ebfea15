#include "kgcot/evidence_miner.hpp"

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <set>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void note(std::vector<std::string>* sink, std::string message) {
    spdlog::warn("{}", message);
    if (sink) sink->push_back(std::move(message));
}

bool path_less(const ReasoningPath& a, const ReasoningPath& b) {
    if (a.length() != b.length()) return a.length() < b.length();
    return a.nodes < b.nodes;
}

std::size_t matching_bracket(const std::string& text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (c == '\\') ++i;
            else if (c == '"') in_string = false;
            continue;
        }
        if (c == '"') in_string = true;
        else if (c == '[') ++depth;
        else if (c == ']' && --depth == 0) return i;
    }
    return std::string::npos;
}

} // namespace

std::optional<std::vector<json>> first_json_array(const std::string& text) {
    for (auto open = text.find('['); open != std::string::npos; open = text.find('[', open + 1)) {
        const auto close = matching_bracket(text, open);
        if (close == std::string::npos) continue;
        try {
            const auto parsed = json::parse(text.substr(open, close - open + 1));
            if (parsed.is_array()) return std::vector<json>(parsed.begin(), parsed.end());
        } catch (const json::exception&) {
        }
    }
    return std::nullopt;
}

std::string render_path(const ReasoningPath& path, const KnowledgeGraph& graph) {
    std::string out = graph.node(path.nodes.front()).name;
    for (std::size_t i = 0; i < path.steps.size(); ++i) {
        const auto& step = path.steps[i];
        if (step.orientation == Orientation::forward) out += " —[" + step.relation + "]→ ";
        else out += " ←[" + step.relation + "]— ";
        out += graph.node(path.nodes[i + 1]).name;
    }
    return out;
}

RelevanceSet select_relevant_nodes(const std::string& disease_node, const std::vector<std::string>& feature_nodes,
                                   const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& node_select,
                                   std::size_t k_node, std::vector<std::string>* warnings) {
    if (feature_nodes.empty()) throw InputError("relevance selection for " + disease_node + ": no mapped feature nodes");
    const std::set<std::string> features(feature_nodes.begin(), feature_nodes.end());
    const auto& disease = graph.node(disease_node);

    std::string listing;
    for (const auto& id : feature_nodes) {
        if (id == disease_node) continue;
        const auto& n = graph.node(id);
        if (!listing.empty()) listing += '\n';
        listing += "- " + n.id + " | " + n.name + " | " + n.type;
    }
    ChatRequest request;
    request.tag = "node_select";
    request.messages = node_select.render({{"disease_name", disease.name},
                                           {"disease_node", disease_node},
                                           {"features", listing},
                                           {"k_node", std::to_string(k_node)}});
    const auto reply = gateway.chat(request).text;

    RelevanceSet set{disease_node, {}};
    const auto entries = first_json_array(reply);
    if (!entries) throw ProviderError("relevance reply for " + disease_node + " contains no JSON array");
    std::set<std::string> seen;
    for (const auto& entry : *entries) {
        if (!entry.is_string()) {
            note(warnings, fmt::format("{}: dropped non-string relevance entry {}", disease_node, entry.dump()));
            continue;
        }
        const auto text = entry.get<std::string>();
        std::string resolved;
        if (features.contains(text) || text == disease_node) {
            resolved = text;
        } else {
            for (const auto& id : graph.nodes_named(text)) {
                if (features.contains(id) || id == disease_node) {
                    resolved = id;
                    break;
                }
            }
        }
        if (resolved == disease_node) {
            note(warnings, fmt::format("{}: dropped \"{}\" (the target disease itself)", disease_node, text));
            continue;
        }
        if (resolved.empty()) {
            note(warnings, fmt::format("{}: dropped \"{}\" (not a mapped feature node)", disease_node, text));
            continue;
        }
        if (!seen.insert(resolved).second) continue;
        set.members.push_back(resolved);
    }
    if (set.members.size() > k_node) {
        note(warnings, fmt::format("{}: relevance reply truncated from {} to {} members", disease_node,
                                   set.members.size(), k_node));
        set.members.resize(k_node);
    }
    if (set.members.empty())
        throw ProviderError("relevance reply for " + disease_node + " names no valid feature node; evidence cannot be built");
    return set;
}

std::vector<ReasoningPath> extract_candidate_paths(const RelevanceSet& relevance, const KnowledgeGraph& graph,
                                                   const PathQuery& query, std::vector<std::string>* flags) {
    std::vector<ReasoningPath> pooled;
    for (const auto& member : relevance.members) {
        auto paths = all_shortest_paths(graph, member, relevance.disease_node, query);
        if (paths.empty()) {
            if (flags) flags->push_back("no_path:" + member);
            continue;
        }
        for (auto& p : paths) pooled.push_back(std::move(p));
    }
    std::stable_sort(pooled.begin(), pooled.end(), path_less);
    return pooled;
}

namespace {

PruneResult fallback(const std::vector<ReasoningPath>& candidates, std::size_t k_path, PruneResult result) {
    result.fallback = true;
    result.paths.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(std::min(k_path, candidates.size())));
    return result;
}

} // namespace

PruneResult parse_path_selection(const std::vector<ReasoningPath>& candidates, const std::string& reply,
                                 std::size_t k_path) {
    PruneResult result;
    const auto entries = first_json_array(reply);
    std::vector<std::size_t> chosen;
    if (entries) {
        std::set<std::size_t> seen;
        for (const auto& e : *entries) {
            if (!e.is_number_integer()) {
                result.warnings.push_back("path selection: ignored non-integer entry " + e.dump());
                continue;
            }
            const auto value = e.get<long long>();
            if (value < 1 || static_cast<std::size_t>(value) > candidates.size()) {
                result.warnings.push_back(fmt::format("path selection: index {} out of range 1..{}", value, candidates.size()));
                continue;
            }
            const auto index = static_cast<std::size_t>(value - 1);
            if (seen.insert(index).second) chosen.push_back(index);
        }
    }
    if (chosen.empty()) {
        result.warnings.push_back("path selection reply yielded no valid index; using the shortest candidates");
        return fallback(candidates, k_path, std::move(result));
    }
    if (chosen.size() > k_path) chosen.resize(k_path);
    for (auto i : chosen) result.paths.push_back(candidates[i]);
    return result;
}

PruneResult prune_paths(const std::vector<ReasoningPath>& candidates, const std::string& disease_node,
                        const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& path_select,
                        std::size_t k_path) {
    if (candidates.empty()) return {};
    std::string listing;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (!listing.empty()) listing += '\n';
        listing += std::to_string(i + 1) + ". " + render_path(candidates[i], graph);
    }
    ChatRequest request;
    request.tag = "path_select";
    request.messages = path_select.render({{"disease_name", graph.node(disease_node).name},
                                           {"disease_node", disease_node},
                                           {"paths", listing},
                                           {"k_path", std::to_string(k_path)}});
    PruneResult result;
    try {
        result = parse_path_selection(candidates, gateway.chat(request).text, k_path);
    } catch (const ProviderError& e) {
        PruneResult failed;
        failed.warnings.push_back(std::string("path selection provider failure: ") + e.what());
        result = fallback(candidates, k_path, std::move(failed));
    }
    for (const auto& w : result.warnings) spdlog::warn("{}: {}", disease_node, w);
    return result;
}

std::vector<std::string> mapped_feature_nodes(const std::vector<MappingRecord>& mapping) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : mapping) {
        if (r.node_id && seen.insert(*r.node_id).second) out.push_back(*r.node_id);
    }
    return out;
}

namespace {

// Top-m features by embedding similarity to the disease node, kept in input order.
std::vector<std::string> prefilter(const std::vector<std::string>& features, const std::string& disease_node,
                                   const KnowledgeGraph& graph, LlmGateway& gateway, std::size_t m) {
    std::vector<std::string> texts{graph.node(disease_node).name};
    for (const auto& id : features) texts.push_back(graph.node(id).name);
    const auto vectors = gateway.embed(texts);
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < features.size(); ++i) {
        double score = -2.0;
        try {
            score = cosine(vectors[0], vectors[i + 1]);
        } catch (const InputError&) {
        }
        scored.push_back({score, i});
    }
    std::stable_sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return features[a.second] < features[b.second];
    });
    scored.resize(m);
    std::vector<std::size_t> keep;
    for (const auto& [score, i] : scored) keep.push_back(i);
    std::sort(keep.begin(), keep.end());
    std::vector<std::string> out;
    for (auto i : keep) out.push_back(features[i]);
    return out;
}

} // namespace

DiseaseEvidence build_evidence(const std::string& disease_id, const std::string& disease_node,
                               const std::vector<MappingRecord>& mapping, const KnowledgeGraph& graph,
                               LlmGateway& gateway, const PromptSet& prompts, const EvidenceConfig& config) {
    if (!graph.has_node(disease_node)) throw InputError("disease " + disease_id + ": node " + disease_node + " not in graph");
    DiseaseEvidence ev;
    ev.disease_id = disease_id;
    ev.disease_node = disease_node;

    auto features = mapped_feature_nodes(mapping);
    std::erase(features, disease_node);
    for (const auto& id : features) {
        if (!graph.has_node(id)) throw InputError("mapping references node " + id + " absent from the graph");
    }
    if (features.empty()) throw InputError("disease " + disease_id + ": mapping has no feature nodes");
    if (config.prefilter_m > 0 && features.size() > config.prefilter_m) {
        ev.flags.push_back(fmt::format("prefilter:{}of{}", config.prefilter_m, features.size()));
        features = prefilter(features, disease_node, graph, gateway, config.prefilter_m);
    }

    ev.relevance = select_relevant_nodes(disease_node, features, graph, gateway, prompts.node_select, config.k_node,
                                         &ev.warnings);
    const PathQuery query{config.max_hops, config.max_paths_per_pair, config.directed};
    const auto candidates = extract_candidate_paths(ev.relevance, graph, query, &ev.flags);
    if (candidates.empty()) {
        ev.flags.push_back("no_candidates");
        note(&ev.warnings, disease_id + ": no relevance member reaches the disease node within the hop bound");
    } else {
        auto pruned = prune_paths(candidates, disease_node, graph, gateway, prompts.path_select, config.k_path);
        ev.paths = std::move(pruned.paths);
        if (pruned.fallback) ev.flags.push_back("fallback");
        for (auto& w : pruned.warnings) ev.warnings.push_back(std::move(w));
    }

    ev.provenance = {
        {"provider", gateway.provider_id()},
        {"model", gateway.model()},
        {"node_select", prompts.node_select.label()},
        {"path_select", prompts.path_select.label()},
        {"k_node", std::to_string(config.k_node)},
        {"k_path", std::to_string(config.k_path)},
        {"max_hops", std::to_string(config.max_hops)},
        {"candidate_paths", std::to_string(candidates.size())},
    };
    return ev;
}

std::string evidence_to_json(const DiseaseEvidence& ev) {
    ordered_json j;
    j["disease_id"] = ev.disease_id;
    j["disease_node"] = ev.disease_node;
    j["relevance"] = ev.relevance.members;
    j["paths"] = ordered_json::array();
    for (const auto& p : ev.paths) {
        ordered_json path;
        path["nodes"] = p.nodes;
        path["steps"] = ordered_json::array();
        for (const auto& s : p.steps) {
            ordered_json step;
            step["relation"] = s.relation;
            step["orientation"] = to_string(s.orientation);
            if (s.relations.size() > 1) {
                step["parallel"] = ordered_json::array();
                for (const auto& [rel, o] : s.relations)
                    step["parallel"].push_back({{"relation", rel}, {"orientation", to_string(o)}});
            }
            path["steps"].push_back(std::move(step));
        }
        j["paths"].push_back(std::move(path));
    }
    j["flags"] = ev.flags;
    j["warnings"] = ev.warnings;
    j["provenance"] = ordered_json::object();
    for (const auto& [k, v] : ev.provenance) j["provenance"][k] = v;
    return j.dump(2) + "\n";
}

DiseaseEvidence evidence_from_json(const std::string& text) {
    try {
        const auto j = json::parse(text);
        DiseaseEvidence ev;
        ev.disease_id = j.at("disease_id").get<std::string>();
        ev.disease_node = j.at("disease_node").get<std::string>();
        ev.relevance = {ev.disease_node, j.at("relevance").get<std::vector<std::string>>()};
        for (const auto& p : j.at("paths")) {
            ReasoningPath path;
            path.nodes = p.at("nodes").get<std::vector<std::string>>();
            for (const auto& s : p.at("steps")) {
                PathStep step;
                step.relation = s.at("relation").get<std::string>();
                step.orientation = orientation_from_string(s.at("orientation").get<std::string>());
                if (s.contains("parallel")) {
                    for (const auto& r : s["parallel"])
                        step.relations.push_back({r.at("relation").get<std::string>(),
                                                  orientation_from_string(r.at("orientation").get<std::string>())});
                } else {
                    step.relations.push_back({step.relation, step.orientation});
                }
                path.steps.push_back(std::move(step));
            }
            if (path.nodes.size() != path.steps.size() + 1) throw InputError("path node/step count mismatch");
            ev.paths.push_back(std::move(path));
        }
        ev.flags = j.value("flags", std::vector<std::string>{});
        ev.warnings = j.value("warnings", std::vector<std::string>{});
        const auto provenance = j.value("provenance", json::object());
        for (const auto& [k, v] : provenance.items()) ev.provenance[k] = v.get<std::string>();
        return ev;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed evidence file: ") + e.what());
    }
}

DiseaseEvidence load_evidence(const std::filesystem::path& path) {
    try {
        return evidence_from_json(read_file(path));
    } catch (const InputError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

} // namespace kgcot
