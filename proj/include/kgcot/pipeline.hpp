#pragma once
// Stage orchestration behind the `kgcot` command line: one JSON config,
// relative paths resolved against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgcot/cot_forge.hpp"
#include "kgcot/entity_align.hpp"
#include "kgcot/eval_harness.hpp"
#include "kgcot/evidence_miner.hpp"
#include "kgcot/kg_store.hpp"
#include "kgcot/llm_gateway.hpp"
#include "kgcot/study_server.hpp"
#include "kgcot/study_service.hpp"

namespace kgcot {

struct StudyConfig {
    std::filesystem::path system1_outputs;
    std::filesystem::path system2_outputs;
    std::string system1_name = "system1";
    std::string system2_name = "system2";
    bool allow_ties = false;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string admin_token_env = "KGCOT_STUDY_TOKEN";
    std::filesystem::path static_dir;
};

struct PipelineConfig {
    std::filesystem::path config_path;

    std::filesystem::path kg_nodes;
    std::filesystem::path kg_edges;
    std::filesystem::path vocab;
    std::filesystem::path cohort;
    std::filesystem::path label_map;
    std::filesystem::path prompts;
    std::filesystem::path out_dir;
    std::filesystem::path cache_dir;
    std::filesystem::path predictions; // optional
    ColumnMap columns;

    AlignmentConfig alignment;
    EvidenceConfig evidence;
    CotConfig cot;
    double test_frac = 0.10;
    std::vector<std::size_t> train_sizes{400, 1000};
    std::optional<std::size_t> cot_train_size; // default: largest train split
    double threshold = 0.5;
    std::uint64_t seed = 7;

    ProviderConfig provider;
    StudyConfig study;

    std::vector<std::string> disease_ids() const;
};

// The ten prediction targets used when a config names none.
std::vector<DiseaseTarget> default_diseases();

struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> out_dir;
};

// Unknown keys are rejected. Env: KGCOT_API_BASE replaces provider.base_url,
// KGCOT_CACHE_DIR replaces the cache directory.
PipelineConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

nlohmann::ordered_json resolved_config_json(const PipelineConfig& config, const PromptSet* prompts);

// Output locations under out_dir.
struct OutputLayout {
    std::filesystem::path root;
    std::filesystem::path mapping() const { return root / "mapping.jsonl"; }
    std::filesystem::path alignment_summary() const { return root / "alignment-summary.json"; }
    std::filesystem::path cases() const { return root / "cohort" / "cases.jsonl"; }
    std::filesystem::path splits() const { return root / "cohort" / "splits.json"; }
    std::filesystem::path evidence_dir() const { return root / "evidence"; }
    std::filesystem::path evidence(const std::string& disease_id) const { return evidence_dir() / (disease_id + ".json"); }
    std::filesystem::path corpus() const { return root / "cot" / "corpus.jsonl"; }
    std::filesystem::path generations() const { return root / "cot" / "generations.jsonl"; }
    std::filesystem::path cot_report() const { return root / "cot" / "report.json"; }
    std::filesystem::path metrics_json() const { return root / "metrics.json"; }
    std::filesystem::path metrics_csv() const { return root / "metrics.csv"; }
    std::filesystem::path study_dir() const { return root / "study"; }
    std::filesystem::path resolved_config() const { return root / "resolved-config.json"; }
    std::filesystem::path provider_stats() const { return root / "provider-stats.json"; }
};

// One pipeline invocation: lazily builds the gateway and shares it across stages.
class Pipeline {
public:
    explicit Pipeline(PipelineConfig config);
    ~Pipeline();

    const PipelineConfig& config() const { return config_; }
    OutputLayout layout() const { return {config_.out_dir}; }

    AlignmentResult map_entities();
    CohortSplit build_cohort();
    std::map<std::string, DiseaseEvidence> mine_evidence();
    CotRun gen_cot();
    MetricReport evaluate(const std::optional<std::filesystem::path>& predictions = std::nullopt);
    void run_all();

    // Loads study/study.json, or builds and saves it from the configured outputs.
    Study prepare_study();

    // Writes resolved-config.json and, once the gateway exists, provider-stats.json.
    void write_audit();
    std::optional<GatewayStats> provider_stats() const;

private:
    LlmGateway& gateway();
    const KnowledgeGraph& graph();
    const Vocabulary& vocab();
    const PromptSet& prompts();

    PipelineConfig config_;
    std::unique_ptr<LlmGateway> gateway_;
    std::optional<KnowledgeGraph> graph_;
    std::optional<Vocabulary> vocab_;
    std::optional<PromptSet> prompts_;
};

} // namespace kgcot
