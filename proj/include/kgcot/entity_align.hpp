#pragma once
// Vocabulary-to-KG alignment: exact label match, embedding similarity above
// a threshold, then LLM validation of every similarity-stage proposal.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kgcot/ehr_ingest.hpp"
#include "kgcot/kg_store.hpp"
#include "kgcot/llm_gateway.hpp"
#include "kgcot/prompt.hpp"

namespace kgcot {

struct ConceptEntry {
    std::string code;
    std::string description;
};

struct Candidate {
    std::string node_id;
    double score = 0.0;
    bool operator==(const Candidate&) const = default;
};

struct CandidateSet {
    ConceptEntry entry;
    std::vector<Candidate> candidates; // descending score, ties by node_id
    bool contains(const std::string& node_id) const;
};

enum class MappingStage { exact, similarity, llm_validated, llm_revised, rejected };

const char* to_string(MappingStage stage);
MappingStage mapping_stage_from_string(const std::string& text);

struct MappingRecord {
    std::string code;
    std::optional<std::string> node_id;
    MappingStage stage = MappingStage::rejected;
    double score = 0.0;
    std::string note;
    bool operator==(const MappingRecord&) const = default;
};

// Unit-normalized node-name embeddings, built once per graph.
class NodeEmbeddingIndex {
public:
    static NodeEmbeddingIndex build(const KnowledgeGraph& graph, LlmGateway& gateway,
                                    std::vector<std::string>* warnings = nullptr);
    // Raw vectors, one per node in graph order. Zero-norm vectors are skipped.
    static NodeEmbeddingIndex from_vectors(const KnowledgeGraph& graph, const std::vector<Embedding>& vectors,
                                           std::vector<std::string>* warnings = nullptr);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const Embedding* vector_for(const std::string& node_id) const;

    // Top-c nodes by cosine to `query`, restricted by `keep` when given.
    std::vector<Candidate> top(const Embedding& query, std::size_t c,
                               const std::function<bool(const std::string&)>& keep = {}) const;

private:
    std::size_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<Embedding> unit_;
};

double cosine(const Embedding& a, const Embedding& b);

CandidateSet retrieve_candidates(const ConceptEntry& entry, const Embedding& entry_vector,
                                 const NodeEmbeddingIndex& index, std::size_t c = 20);

// Lowest node_id wins on shared labels; a warning is appended in that case.
std::optional<MappingRecord> stage1_exact(const ConceptEntry& entry, const KnowledgeGraph& graph,
                                          std::vector<std::string>* warnings = nullptr);

std::optional<MappingRecord> stage2_similarity(const CandidateSet& candidates, double tau = 0.85);

struct Provisional {
    MappingRecord record;
    CandidateSet candidates;
};

// Parses a stage-3 reply into the final record.
MappingRecord apply_verdict(const Provisional& provisional, const std::string& reply);

std::vector<MappingRecord> stage3_validate(const std::vector<Provisional>& provisional,
                                           const KnowledgeGraph& graph, LlmGateway& gateway,
                                           const PromptTemplate& entity_select);

struct DiseaseTarget {
    std::string disease_id;
    std::string name;
    std::string node_id; // optional pin
};

struct AlignmentConfig {
    std::size_t candidates = 20;
    double tau = 0.85;
    bool validate = true;
    std::vector<DiseaseTarget> diseases;
};

struct AlignmentResult {
    std::vector<MappingRecord> records; // vocabulary order
    std::map<std::string, std::size_t> stage_counts;
    std::map<std::string, std::string> disease_nodes; // disease_id -> node_id
    std::vector<std::string> warnings;
};

std::string resolve_disease(const DiseaseTarget& target, const KnowledgeGraph& graph,
                            const NodeEmbeddingIndex& index, LlmGateway& gateway, double tau);

AlignmentResult run_alignment(const Vocabulary& vocab, const KnowledgeGraph& graph, LlmGateway& gateway,
                              const PromptTemplate& entity_select, const AlignmentConfig& config);

std::string mapping_to_jsonl(const std::vector<MappingRecord>& records);
std::vector<MappingRecord> mapping_from_jsonl(const std::string& text);
std::vector<MappingRecord> load_mapping(const std::filesystem::path& path);
std::string alignment_summary_json(const AlignmentResult& result);

} // namespace kgcot
