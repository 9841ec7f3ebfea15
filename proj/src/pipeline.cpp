#include "kgcot/pipeline.hpp"

#include "kgcot/common.hpp"
#include "kgcot/ehr_ingest.hpp"

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <set>

namespace kgcot {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::vector<DiseaseTarget> default_diseases() {
    return {
        {"acute_myocardial_infarction", "Acute myocardial infarction", ""},
        {"chronic_kidney_disease", "Chronic kidney disease", ""},
        {"copd", "Chronic obstructive pulmonary disease", ""},
        {"conduction_disorders", "Conduction disorders", ""},
        {"coronary_atherosclerosis", "Coronary atherosclerosis", ""},
        {"diabetes_without_complication", "Diabetes mellitus (no complication)", ""},
        {"essential_hypertension", "Essential hypertension", ""},
        {"gastrointestinal_hemorrhage", "Gastrointestinal hemorrhage", ""},
        {"pneumonia", "Pneumonia", ""},
        {"shock", "Shock", ""},
    };
}

std::vector<std::string> PipelineConfig::disease_ids() const {
    std::vector<std::string> ids;
    for (const auto& d : alignment.diseases) ids.push_back(d.disease_id);
    return ids;
}

namespace {

void check_keys(const json& object, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!object.is_object()) throw InputError("config " + where + " must be an object");
    for (const auto& [key, _] : object.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw InputError("config " + where + ": unknown key \"" + key + "\"");
    }
}

template <typename T>
void read(const json& object, const char* key, T& target) {
    if (object.contains(key) && !object[key].is_null()) target = object[key].get<T>();
}

void read_path(const json& object, const char* key, const fs::path& base, fs::path& target) {
    if (object.contains(key) && !object[key].is_null()) {
        const fs::path p = object[key].get<std::string>();
        target = p.is_absolute() ? p : (base / p).lexically_normal();
    }
}

void require_file(const fs::path& path, const char* what) {
    if (path.empty()) throw InputError(std::string("config does not set ") + what);
    if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path.string());
}

void write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, content);
}

ordered_json stats_json(const GatewayStats& s) {
    return {{"chat_calls", s.chat_calls},
            {"chat_cache_hits", s.chat_cache_hits},
            {"embed_calls", s.embed_calls},
            {"embed_cache_hits", s.embed_cache_hits},
            {"retries", s.retries}};
}

} // namespace

PipelineConfig load_config(const fs::path& path, const ConfigOverrides& overrides) {
    if (!fs::exists(path)) throw InputError("config not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    PipelineConfig c;
    c.config_path = fs::absolute(path).lexically_normal();
    const auto base = c.config_path.parent_path();
    c.out_dir = base / "out";
    c.alignment.diseases = default_diseases();

    try {
        check_keys(j, "root", {"paths", "column_map", "parameters", "provider", "diseases", "study"});
        if (j.contains("paths")) {
            const auto p = j["paths"];
            check_keys(p, "paths", {"kg_nodes", "kg_edges", "vocab", "cohort", "label_map", "prompts", "out", "cache",
                                    "predictions"});
            read_path(p, "kg_nodes", base, c.kg_nodes);
            read_path(p, "kg_edges", base, c.kg_edges);
            read_path(p, "vocab", base, c.vocab);
            read_path(p, "cohort", base, c.cohort);
            read_path(p, "label_map", base, c.label_map);
            read_path(p, "prompts", base, c.prompts);
            read_path(p, "out", base, c.out_dir);
            read_path(p, "cache", base, c.cache_dir);
            read_path(p, "predictions", base, c.predictions);
        }
        if (j.contains("column_map")) {
            const auto m = j["column_map"];
            check_keys(m, "column_map", {"node_id", "node_type", "node_name", "source", "src_id", "dst_id", "relation",
                                         "display_relation", "delimiter"});
            read(m, "node_id", c.columns.node_id);
            read(m, "node_type", c.columns.node_type);
            read(m, "node_name", c.columns.node_name);
            read(m, "source", c.columns.source);
            read(m, "src_id", c.columns.src_id);
            read(m, "dst_id", c.columns.dst_id);
            read(m, "relation", c.columns.relation);
            read(m, "display_relation", c.columns.display_relation);
            if (m.contains("delimiter")) {
                const auto d = m["delimiter"].get<std::string>();
                if (d.size() != 1) throw InputError("column_map.delimiter must be one character");
                c.columns.delimiter = d[0];
            }
        }
        if (j.contains("parameters")) {
            const auto p = j["parameters"];
            check_keys(p, "parameters",
                       {"tau", "candidates", "validate", "k_node", "k_path", "max_hops", "max_paths", "prefilter_m",
                        "directed", "test_frac", "train_sizes", "cot_train_size", "threshold", "seed", "fail_fast",
                        "prompt_char_budget", "include_absent", "temperature", "max_output"});
            read(p, "tau", c.alignment.tau);
            read(p, "candidates", c.alignment.candidates);
            read(p, "validate", c.alignment.validate);
            read(p, "k_node", c.evidence.k_node);
            read(p, "k_path", c.evidence.k_path);
            read(p, "max_hops", c.evidence.max_hops);
            read(p, "max_paths", c.evidence.max_paths_per_pair);
            read(p, "prefilter_m", c.evidence.prefilter_m);
            read(p, "directed", c.evidence.directed);
            read(p, "test_frac", c.test_frac);
            read(p, "train_sizes", c.train_sizes);
            if (p.contains("cot_train_size") && !p["cot_train_size"].is_null())
                c.cot_train_size = p["cot_train_size"].get<std::size_t>();
            read(p, "threshold", c.threshold);
            read(p, "seed", c.seed);
            read(p, "fail_fast", c.cot.fail_fast);
            read(p, "prompt_char_budget", c.cot.prompt_char_budget);
            read(p, "include_absent", c.cot.include_absent);
            read(p, "temperature", c.cot.temperature);
            read(p, "max_output", c.cot.max_output);
        }
        if (j.contains("provider")) {
            const auto p = j["provider"];
            check_keys(p, "provider", {"kind", "base_url", "model", "embedding_model", "api_key_env", "scenario",
                                       "max_in_flight", "retries", "backoff_ms", "timeout_s", "embed_batch",
                                       "request_logprobs"});
            const auto kind = p.value("kind", std::string("mock"));
            if (kind == "mock") c.provider.kind = ProviderConfig::Kind::mock;
            else if (kind == "openai_compatible") c.provider.kind = ProviderConfig::Kind::http_openai_compatible;
            else throw InputError("provider.kind must be \"mock\" or \"openai_compatible\"");
            read(p, "base_url", c.provider.base_url);
            read(p, "model", c.provider.model);
            read(p, "embedding_model", c.provider.embedding_model);
            read(p, "api_key_env", c.provider.api_key_env);
            read_path(p, "scenario", base, c.provider.scenario);
            read(p, "max_in_flight", c.provider.max_in_flight);
            read(p, "retries", c.provider.retries);
            read(p, "backoff_ms", c.provider.backoff_ms);
            read(p, "timeout_s", c.provider.timeout_s);
            read(p, "embed_batch", c.provider.embed_batch);
            read(p, "request_logprobs", c.provider.request_logprobs);
        }
        if (j.contains("diseases")) {
            c.alignment.diseases.clear();
            std::set<std::string> seen;
            for (const auto& d : j["diseases"]) {
                check_keys(d, "diseases[]", {"disease_id", "name", "node_id"});
                DiseaseTarget t;
                t.disease_id = d.at("disease_id").get<std::string>();
                t.name = d.value("name", t.disease_id);
                t.node_id = d.value("node_id", std::string());
                if (!seen.insert(t.disease_id).second) throw InputError("duplicate disease " + t.disease_id);
                c.alignment.diseases.push_back(std::move(t));
            }
            if (c.alignment.diseases.empty()) throw InputError("config lists no diseases");
        }
        if (j.contains("study")) {
            const auto s = j["study"];
            check_keys(s, "study", {"system1_outputs", "system2_outputs", "system_names", "allow_ties", "host", "port",
                                    "admin_token_env", "static_dir"});
            read_path(s, "system1_outputs", base, c.study.system1_outputs);
            read_path(s, "system2_outputs", base, c.study.system2_outputs);
            if (s.contains("system_names")) {
                const auto names = s["system_names"].get<std::vector<std::string>>();
                if (names.size() != 2) throw InputError("study.system_names must hold two names");
                c.study.system1_name = names[0];
                c.study.system2_name = names[1];
            }
            read(s, "allow_ties", c.study.allow_ties);
            read(s, "host", c.study.host);
            read(s, "port", c.study.port);
            read(s, "admin_token_env", c.study.admin_token_env);
            read_path(s, "static_dir", base, c.study.static_dir);
        }
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }

    if (overrides.seed) c.seed = *overrides.seed;
    if (overrides.out_dir) c.out_dir = fs::absolute(*overrides.out_dir).lexically_normal();
    if (const char* env = std::getenv("KGCOT_API_BASE"); env && *env) c.provider.base_url = env;
    if (const char* env = std::getenv("KGCOT_CACHE_DIR"); env && *env) c.cache_dir = fs::absolute(env);
    if (c.cache_dir.empty()) c.cache_dir = c.out_dir / "cache";
    c.provider.cache_dir = c.cache_dir;

    if (c.train_sizes.empty()) throw InputError("parameters.train_sizes is empty");
    if (c.cot_train_size &&
        std::find(c.train_sizes.begin(), c.train_sizes.end(), *c.cot_train_size) == c.train_sizes.end())
        throw InputError("parameters.cot_train_size must be one of train_sizes");
    if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) throw InputError("parameters.threshold must lie in [0, 1]");
    if (c.alignment.tau < -1.0 || c.alignment.tau > 1.0) throw InputError("parameters.tau must lie in [-1, 1]");
    return c;
}

ordered_json resolved_config_json(const PipelineConfig& c, const PromptSet* prompts) {
    ordered_json j;
    j["config"] = c.config_path.string();
    j["paths"] = {{"kg_nodes", c.kg_nodes.string()}, {"kg_edges", c.kg_edges.string()}, {"vocab", c.vocab.string()},
                  {"cohort", c.cohort.string()},     {"label_map", c.label_map.string()}, {"prompts", c.prompts.string()},
                  {"out", c.out_dir.string()},       {"cache", c.cache_dir.string()},
                  {"predictions", c.predictions.string()}};
    j["column_map"] = {{"node_id", c.columns.node_id},   {"node_type", c.columns.node_type},
                       {"node_name", c.columns.node_name}, {"source", c.columns.source},
                       {"src_id", c.columns.src_id},     {"dst_id", c.columns.dst_id},
                       {"relation", c.columns.relation}, {"display_relation", c.columns.display_relation},
                       {"delimiter", std::string(1, c.columns.delimiter)}};
    j["parameters"] = {{"tau", c.alignment.tau},
                       {"candidates", c.alignment.candidates},
                       {"validate", c.alignment.validate},
                       {"k_node", c.evidence.k_node},
                       {"k_path", c.evidence.k_path},
                       {"max_hops", c.evidence.max_hops},
                       {"max_paths", c.evidence.max_paths_per_pair},
                       {"prefilter_m", c.evidence.prefilter_m},
                       {"directed", c.evidence.directed},
                       {"test_frac", c.test_frac},
                       {"train_sizes", c.train_sizes},
                       {"cot_train_size", c.cot_train_size ? ordered_json(*c.cot_train_size) : ordered_json(nullptr)},
                       {"threshold", c.threshold},
                       {"seed", c.seed},
                       {"fail_fast", c.cot.fail_fast},
                       {"prompt_char_budget", c.cot.prompt_char_budget},
                       {"include_absent", c.cot.include_absent},
                       {"temperature", c.cot.temperature},
                       {"max_output", c.cot.max_output}};
    j["provider"] = {{"kind", c.provider.kind == ProviderConfig::Kind::mock ? "mock" : "openai_compatible"},
                     {"base_url", c.provider.base_url},
                     {"model", c.provider.model},
                     {"embedding_model", c.provider.embedding_model},
                     {"api_key_env", c.provider.api_key_env},
                     {"scenario", c.provider.scenario.string()},
                     {"max_in_flight", c.provider.max_in_flight},
                     {"retries", c.provider.retries},
                     {"backoff_ms", c.provider.backoff_ms},
                     {"timeout_s", c.provider.timeout_s},
                     {"embed_batch", c.provider.embed_batch},
                     {"request_logprobs", c.provider.request_logprobs}};
    j["diseases"] = ordered_json::array();
    for (const auto& d : c.alignment.diseases)
        j["diseases"].push_back({{"disease_id", d.disease_id}, {"name", d.name}, {"node_id", d.node_id}});
    j["study"] = {{"system1_outputs", c.study.system1_outputs.string()},
                  {"system2_outputs", c.study.system2_outputs.string()},
                  {"system_names", {c.study.system1_name, c.study.system2_name}},
                  {"allow_ties", c.study.allow_ties},
                  {"host", c.study.host},
                  {"port", c.study.port},
                  {"admin_token_env", c.study.admin_token_env},
                  {"static_dir", c.study.static_dir.string()}};
    if (prompts) {
        j["templates"] = {{"entity_select", prompts->entity_select.label()},
                          {"node_select", prompts->node_select.label()},
                          {"path_select", prompts->path_select.label()},
                          {"cot_gen", prompts->cot_gen.label()}};
    }
    return j;
}

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) {}

Pipeline::~Pipeline() = default;

LlmGateway& Pipeline::gateway() {
    if (!gateway_) {
        config_.provider.validate();
        if (config_.provider.kind == ProviderConfig::Kind::mock) require_file(config_.provider.scenario, "provider.scenario");
        gateway_ = std::make_unique<LlmGateway>(make_backend(config_.provider), config_.provider);
    }
    return *gateway_;
}

const KnowledgeGraph& Pipeline::graph() {
    if (!graph_) {
        require_file(config_.kg_nodes, "paths.kg_nodes");
        require_file(config_.kg_edges, "paths.kg_edges");
        graph_ = load_graph(config_.kg_nodes, config_.kg_edges, config_.columns);
    }
    return *graph_;
}

const Vocabulary& Pipeline::vocab() {
    if (!vocab_) {
        require_file(config_.vocab, "paths.vocab");
        vocab_ = load_vocab(config_.vocab);
    }
    return *vocab_;
}

const PromptSet& Pipeline::prompts() {
    if (!prompts_) {
        require_file(config_.prompts, "paths.prompts");
        prompts_ = PromptSet::load(config_.prompts);
    }
    return *prompts_;
}

std::optional<GatewayStats> Pipeline::provider_stats() const {
    if (!gateway_) return std::nullopt;
    return gateway_->stats();
}

void Pipeline::write_audit() {
    const auto out = layout();
    const PromptSet* p = nullptr;
    if (!prompts_ && !config_.prompts.empty() && fs::exists(config_.prompts)) {
        try {
            prompts();
        } catch (const InputError&) {
        }
    }
    if (prompts_) p = &*prompts_;
    write_text(out.resolved_config(), resolved_config_json(config_, p).dump(2) + "\n");
    if (gateway_) {
        ordered_json s = stats_json(gateway_->stats());
        s["provider"] = gateway_->provider_id();
        s["model"] = gateway_->model();
        write_text(out.provider_stats(), s.dump(2) + "\n");
    }
}

AlignmentResult Pipeline::map_entities() {
    const auto& v = vocab();
    const auto& g = graph();
    const auto& p = prompts();
    auto result = run_alignment(v, g, gateway(), p.entity_select, config_.alignment);
    const auto out = layout();
    write_text(out.mapping(), mapping_to_jsonl(result.records));
    write_text(out.alignment_summary(), alignment_summary_json(result));
    spdlog::info("mapped {} codes ({} exact, {} rejected)", result.records.size(), result.stage_counts["exact"],
                 result.stage_counts["rejected"]);
    return result;
}

CohortSplit Pipeline::build_cohort() {
    require_file(config_.cohort, "paths.cohort");
    require_file(config_.label_map, "paths.label_map");
    const auto cases = build_pairs(load_cohort(config_.cohort), load_label_map(config_.label_map), config_.disease_ids());
    auto split = make_splits(cases, config_.seed, config_.test_frac, config_.train_sizes);
    std::string lines;
    for (const auto& c : cases) lines += case_to_json(c) + "\n";
    const auto out = layout();
    write_text(out.cases(), lines);
    write_text(out.splits(), splits_to_json(split));
    spdlog::info("built {} cases: {} test, {} dev", cases.size(), split.test.size(), split.dev.size());
    return split;
}

std::map<std::string, DiseaseEvidence> Pipeline::mine_evidence() {
    const auto out = layout();
    require_file(out.mapping(), "mapping.jsonl (run map-entities first)");
    require_file(out.alignment_summary(), "alignment-summary.json (run map-entities first)");
    const auto mapping = load_mapping(out.mapping());
    json summary;
    try {
        summary = json::parse(read_file(out.alignment_summary()));
    } catch (const json::exception& e) {
        throw InputError(out.alignment_summary().string() + ": " + e.what());
    }
    const auto disease_nodes = summary.value("diseases", json::object());
    const auto& g = graph();
    const auto& p = prompts();
    std::map<std::string, DiseaseEvidence> result;
    for (const auto& target : config_.alignment.diseases) {
        if (!disease_nodes.contains(target.disease_id))
            throw InputError("disease " + target.disease_id + " has no mapped node; re-run map-entities");
        const auto node = disease_nodes[target.disease_id].get<std::string>();
        auto evidence = build_evidence(target.disease_id, node, mapping, g, gateway(), p, config_.evidence);
        write_text(out.evidence(target.disease_id), evidence_to_json(evidence));
        spdlog::info("evidence for {}: {} relevance nodes, {} paths", target.disease_id, evidence.relevance.members.size(),
                     evidence.paths.size());
        result.emplace(target.disease_id, std::move(evidence));
    }
    return result;
}

CotRun Pipeline::gen_cot() {
    const auto out = layout();
    require_file(out.mapping(), "mapping.jsonl (run map-entities first)");
    require_file(out.cases(), "cohort/cases.jsonl (run build-cohort first)");
    require_file(out.splits(), "cohort/splits.json (run build-cohort first)");
    const auto mapping = load_mapping(out.mapping());
    const auto split = splits_from_json(read_file(out.splits()));
    const auto size = config_.cot_train_size.value_or(*std::max_element(config_.train_sizes.begin(), config_.train_sizes.end()));
    const auto it = split.train.find(size);
    if (it == split.train.end()) throw InputError("splits.json has no " + split_name(size) + "; re-run build-cohort");
    const std::set<std::string> members(it->second.begin(), it->second.end());
    std::vector<IndexCase> cases;
    for (auto& c : load_cases(out.cases())) {
        if (members.count(c.case_id)) cases.push_back(std::move(c));
    }
    std::map<std::string, DiseaseEvidence> evidence;
    for (const auto& target : config_.alignment.diseases) {
        require_file(out.evidence(target.disease_id), "evidence file (run mine-evidence first)");
        evidence.emplace(target.disease_id, load_evidence(out.evidence(target.disease_id)));
    }
    auto run = generate_and_filter(cases, evidence, mapping, vocab(), graph(), gateway(), prompts().cot_gen, config_.cot);
    run.provenance["train_split"] = split_name(size);
    write_text(out.corpus(), corpus_jsonl(run));
    write_text(out.generations(), generations_jsonl(run));
    write_text(out.cot_report(), cot_report_json(run));
    spdlog::info("chain-of-thought: {} generated, {} kept, {} failed", run.totals.generated, run.totals.kept,
                 run.totals.failed);
    return run;
}

MetricReport Pipeline::evaluate(const std::optional<fs::path>& predictions) {
    const auto path = predictions.value_or(config_.predictions);
    require_file(path, "predictions file");
    require_file(config_.cohort, "paths.cohort");
    require_file(config_.label_map, "paths.label_map");
    const auto records = load_predictions(path);
    std::set<std::string> diseases;
    for (const auto& r : records) diseases.insert(r.disease_id);
    const auto label_map = load_label_map(config_.label_map);
    std::set<std::string> known;
    for (const auto& [code, ids] : label_map) known.insert(ids.begin(), ids.end());
    for (const auto& d : diseases) {
        if (!known.count(d)) throw InputError("predictions name disease " + d + " which the label map does not define");
    }
    const auto cases = build_pairs(load_cohort(config_.cohort), label_map, {diseases.begin(), diseases.end()});
    auto report = classify_and_score(records, label_index(cases), config_.threshold);
    const auto out = layout();
    write_text(out.metrics_json(), metrics_json(report));
    write_text(out.metrics_csv(), metrics_csv(report));
    spdlog::info("scored {} predictions over {} diseases", report.records, report.per_disease.size());
    return report;
}

void Pipeline::run_all() {
    map_entities();
    build_cohort();
    mine_evidence();
    gen_cot();
    if (!config_.predictions.empty()) evaluate();
    else spdlog::info("no predictions configured; skipping evaluate");
}

Study Pipeline::prepare_study() {
    const auto path = layout().study_dir() / "study.json";
    if (fs::exists(path)) return load_study(path);
    require_file(config_.study.system1_outputs, "study.system1_outputs");
    require_file(config_.study.system2_outputs, "study.system2_outputs");
    auto study = build_study(load_system_outputs(config_.study.system1_outputs),
                             load_system_outputs(config_.study.system2_outputs), config_.seed, config_.study.system1_name,
                             config_.study.system2_name);
    study.allow_ties = config_.study.allow_ties;
    fs::create_directories(path.parent_path());
    save_study(study, path);
    return study;
}

} // namespace kgcot
