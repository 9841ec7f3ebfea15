#pragma once
// Per-disease KG evidence: an LLM-selected relevance set over the mapped
// feature nodes, then LLM-pruned shortest paths from those nodes to the
// disease node.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgcot/entity_align.hpp"
#include "kgcot/kg_store.hpp"
#include "kgcot/llm_gateway.hpp"
#include "kgcot/prompt.hpp"

namespace kgcot {

struct RelevanceSet {
    std::string disease_node;
    std::vector<std::string> members;
    bool operator==(const RelevanceSet&) const = default;
};

struct DiseaseEvidence {
    std::string disease_id;
    std::string disease_node;
    RelevanceSet relevance;
    std::vector<ReasoningPath> paths;
    std::vector<std::string> flags;
    std::vector<std::string> warnings;
    std::map<std::string, std::string> provenance;
};

struct EvidenceConfig {
    std::size_t k_node = 8;
    std::size_t k_path = 5;
    std::size_t max_hops = 5;
    std::size_t max_paths_per_pair = 64;
    std::size_t prefilter_m = 300; // 0 keeps every feature node
    bool directed = false;
};

// First bracketed JSON array in free text, if any.
std::optional<std::vector<nlohmann::json>> first_json_array(const std::string& text);

// One line per path: node names joined by relation-labelled arrows that follow edge direction.
std::string render_path(const ReasoningPath& path, const KnowledgeGraph& graph);

RelevanceSet select_relevant_nodes(const std::string& disease_node, const std::vector<std::string>& feature_nodes,
                                   const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& node_select,
                                   std::size_t k_node = 8, std::vector<std::string>* warnings = nullptr);

// Pooled per disease and ordered by (length, node ids). Members with no path
// within the hop bound add a "no_path:<node>" flag.
std::vector<ReasoningPath> extract_candidate_paths(const RelevanceSet& relevance, const KnowledgeGraph& graph,
                                                   const PathQuery& query, std::vector<std::string>* flags = nullptr);

struct PruneResult {
    std::vector<ReasoningPath> paths;
    bool fallback = false;
    std::vector<std::string> warnings;
};

// Reply indices are 1-based positions in `candidates`.
PruneResult parse_path_selection(const std::vector<ReasoningPath>& candidates, const std::string& reply,
                                 std::size_t k_path);

PruneResult prune_paths(const std::vector<ReasoningPath>& candidates, const std::string& disease_node,
                        const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& path_select,
                        std::size_t k_path = 5);

// Distinct mapped node ids, in first-appearance order.
std::vector<std::string> mapped_feature_nodes(const std::vector<MappingRecord>& mapping);

DiseaseEvidence build_evidence(const std::string& disease_id, const std::string& disease_node,
                               const std::vector<MappingRecord>& mapping, const KnowledgeGraph& graph,
                               LlmGateway& gateway, const PromptSet& prompts, const EvidenceConfig& config);

std::string evidence_to_json(const DiseaseEvidence& evidence);
DiseaseEvidence evidence_from_json(const std::string& text);
DiseaseEvidence load_evidence(const std::filesystem::path& path);

} // namespace kgcot
