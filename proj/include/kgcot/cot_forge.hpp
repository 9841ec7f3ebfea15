#pragma once
// KG-anchored chain-of-thought generation, conclusion parsing and
// label-consistency filtering into a supervision corpus.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kgcot/ehr_ingest.hpp"
#include "kgcot/entity_align.hpp"
#include "kgcot/evidence_miner.hpp"
#include "kgcot/kg_store.hpp"
#include "kgcot/llm_gateway.hpp"
#include "kgcot/prompt.hpp"

namespace kgcot {

enum class Conclusion { yes, no, unparseable };

const char* to_string(Conclusion conclusion);

// Final non-empty line "Conclusion: Yes|No" (any case, trailing punctuation
// allowed); otherwise the last standalone yes/no in the final 200 chars.
Conclusion parse_conclusion(const std::string& text);

struct RelevancePartition {
    std::vector<std::string> present; // evidence member order
    std::vector<std::string> absent;
};

RelevancePartition partition_relevance(const IndexCase& index_case, const DiseaseEvidence& evidence,
                                       const std::vector<MappingRecord>& mapping);

struct CotContext {
    std::string case_id;
    std::string disease_id;
    std::string disease_name;
    std::vector<std::string> codes;           // raw codes of x_t+, metadata only
    std::vector<std::string> codes_present;   // descriptions, priority order
    std::size_t codes_omitted = 0;            // cut by the prompt budget
    std::vector<std::string> relevance_present;
    std::vector<std::string> relevance_absent;
    std::vector<std::string> paths;           // rendered arrow chains
    int ground_truth = 0;
};

// Descriptions of codes that map to a relevance member come first.
CotContext build_context(const IndexCase& index_case, const DiseaseEvidence& evidence,
                         const std::vector<MappingRecord>& mapping, const Vocabulary& vocab,
                         const KnowledgeGraph& graph);

std::string label_line(int ground_truth);

std::vector<ChatMessage> render_prompt(const CotContext& ctx, const PromptTemplate& cot_gen, bool include_label,
                                       bool include_absent = true);

// Drops trailing codes_present entries until the generation prompt fits
// `budget` characters; paths are never cut. Returns the number dropped.
std::size_t fit_budget(CotContext& ctx, const PromptTemplate& cot_gen, std::size_t budget);

struct CotConfig {
    bool fail_fast = false;
    std::size_t prompt_char_budget = 16000;
    bool include_absent = true; // in the corpus user message
    double temperature = 0.0;
    int max_output = 1024;
};

enum class UnitStatus { kept, dropped_mismatch, dropped_unparseable, failed };

const char* to_string(UnitStatus status);

struct CotUnit {
    std::string sample_id;
    std::string case_id;
    std::string disease_id;
    int label = 0;
    Conclusion conclusion = Conclusion::unparseable;
    UnitStatus status = UnitStatus::failed;
    std::vector<ChatMessage> messages; // label-free system + user, then assistant trace
    std::string trace;
    std::string error;
    std::size_t codes_truncated = 0;
};

struct CotCounts {
    std::size_t generated = 0;
    std::size_t kept = 0;
    std::size_t dropped_mismatch = 0;
    std::size_t dropped_unparseable = 0;
    std::size_t failed = 0;
    void add(UnitStatus status);
};

struct CotRun {
    std::vector<CotUnit> units; // ordered by (case_id, disease_id)
    CotCounts totals;
    std::map<std::string, CotCounts> per_disease;
    std::map<std::string, std::string> provenance;
};

CotRun generate_and_filter(const std::vector<IndexCase>& cases, const std::map<std::string, DiseaseEvidence>& evidence,
                           const std::vector<MappingRecord>& mapping, const Vocabulary& vocab,
                           const KnowledgeGraph& graph, LlmGateway& gateway, const PromptTemplate& cot_gen,
                           const CotConfig& config);

std::string corpus_jsonl(const CotRun& run);      // kept samples only
std::string generations_jsonl(const CotRun& run); // every unit with its status
std::string cot_report_json(const CotRun& run);

} // namespace kgcot
