#include "kgcot/common.hpp"
#include "kgcot/entity_align.hpp"

#include "../support/alignment_fuzz.hpp"
#include "../support/fixture_env.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <random>
#include <set>

using namespace kgcot;
using namespace kgcot::testing;
using json = nlohmann::json;

namespace {

KnowledgeGraph tiny_graph(const std::vector<std::pair<std::string, std::string>>& id_names) {
    std::vector<KgNode> nodes;
    for (const auto& [id, name] : id_names) nodes.push_back({id, "disease", name, ""});
    return KnowledgeGraph::build(nodes, {});
}

} // namespace

TEST_CASE("cosine") {
    CHECK(cosine({2, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(cosine({1, 0, 0}, {1, 1, 0}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(cosine({1, 0, 0}, {1, 1, 0}) == doctest::Approx(0.70711).epsilon(1e-5));
    CHECK(cosine({1, 2}, {-1, -2}) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine({1, 0}, {1, 0, 0}), ProviderError);
    CHECK_THROWS_AS(cosine({0, 0}, {1, 0}), InputError);
}

TEST_CASE("retrieve_candidates: ranking, ties and zero-norm nodes") {
    const auto graph = tiny_graph({{"n3", "c"}, {"n1", "a"}, {"n2", "b"}, {"n0", "zero"}});
    std::vector<std::string> warnings;
    const auto index = NodeEmbeddingIndex::from_vectors(graph, {{1, 1, 0}, {1, 0, 0}, {1, 1, 0}, {0, 0, 0}}, &warnings);
    CHECK(index.size() == 3);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("n0") != std::string::npos);

    const auto set = retrieve_candidates({"c1", "desc"}, {2, 0, 0}, index, 20);
    REQUIRE(set.candidates.size() == 3);
    CHECK(set.candidates[0].node_id == "n1");
    CHECK(set.candidates[0].score == doctest::Approx(1.0));
    // Equal scores: node id ascending.
    CHECK(set.candidates[1].node_id == "n2");
    CHECK(set.candidates[2].node_id == "n3");
    CHECK(set.candidates[1].score == doctest::Approx(0.70711).epsilon(1e-5));

    CHECK(retrieve_candidates({"c1", "desc"}, {2, 0, 0}, index, 1).candidates.size() == 1);
    CHECK(retrieve_candidates({"c1", "desc"}, {0, 0, 0}, index, 5).candidates.empty());
    CHECK_THROWS_AS(retrieve_candidates({"c1", "desc"}, {1, 0}, index, 5), ProviderError);
}

TEST_CASE("stage1_exact") {
    const auto graph = tiny_graph({{"d:eh", "Essential Hypertension"}, {"d:s2", "shock"}, {"d:s1", "Shock"}});
    auto rec = stage1_exact({"401.9", "essential  hypertension"}, graph);
    REQUIRE(rec);
    CHECK(*rec->node_id == "d:eh");
    CHECK(rec->stage == MappingStage::exact);
    CHECK(rec->score == 1.0);

    CHECK_FALSE(stage1_exact({"x", "hypertension"}, graph));

    std::vector<std::string> warnings;
    rec = stage1_exact({"785.5", "SHOCK"}, graph, &warnings);
    REQUIRE(rec);
    CHECK(*rec->node_id == "d:s1");
    CHECK(warnings.size() == 1);
}

TEST_CASE("stage2_similarity threshold is strict") {
    const auto set = [](double top) {
        return CandidateSet{{"c", "d"}, {{"best", top}, {"next", top - 0.1}}};
    };
    auto rec = stage2_similarity(set(0.86), 0.85);
    REQUIRE(rec);
    CHECK(*rec->node_id == "best");
    CHECK(rec->stage == MappingStage::similarity);
    CHECK(rec->score == 0.86);
    CHECK_FALSE(stage2_similarity(set(1.0 / std::sqrt(2.0)), 0.85));
    CHECK_FALSE(stage2_similarity(set(0.85), 0.85));
    CHECK_FALSE(stage2_similarity(CandidateSet{{"c", "d"}, {}}, 0.85));
}

TEST_CASE("apply_verdict protocol") {
    const Provisional p{{"c", "K1", MappingStage::similarity, 0.9, ""},
                        {{"c", "d"}, {{"K1", 0.9}, {"K12", 0.88}}}};
    auto r = apply_verdict(p, R"({"verdict":"confirm"})");
    CHECK(r.stage == MappingStage::llm_validated);
    CHECK(*r.node_id == "K1");

    r = apply_verdict(p, R"(Sure: {"verdict":"revise","node_id":"K12"})");
    CHECK(r.stage == MappingStage::llm_revised);
    CHECK(*r.node_id == "K12");
    CHECK(r.score == 0.88);

    r = apply_verdict(p, R"({"verdict":"revise","node_id":"K99"})");
    CHECK(r.stage == MappingStage::rejected);
    CHECK_FALSE(r.node_id);
    CHECK(r.note == "out-of-candidate revision");

    r = apply_verdict(p, R"({"verdict":"reject","reason":"nope"})");
    CHECK(r.stage == MappingStage::rejected);
    CHECK(r.note == "nope");

    for (const auto* bad : {"I think it is fine", "{\"verdict\":42}", "{\"verdict\":\"maybe\"}", "{\"verdict\":\"revise\"}", "{broken"}) {
        r = apply_verdict(p, bad);
        CHECK(r.stage == MappingStage::rejected);
        CHECK_FALSE(r.node_id);
    }
}

TEST_CASE("run_alignment on the fixture matches counts derived from the scenario file") {
    const auto graph = fixture_graph();
    const auto vocab = fixture_vocab();
    const auto prompts = fixture_prompts();
    auto gateway = fixture_gateway();
    AlignmentConfig config;
    config.diseases = {{"pneumonia", "Pneumonia", ""}, {"essential_hypertension", "Essential hypertension", ""}};
    const auto result = run_alignment(vocab, graph, *gateway, prompts.entity_select, config);

    // Oracle: scan the scenario script.
    const auto scenario = json::parse(read_file(kFixtureDir / "scenario.json"));
    std::set<std::string> labels;
    for (const auto& n : graph.nodes()) labels.insert(oracle_norm(n.name));
    std::map<std::string, std::size_t> expected;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const auto& desc = vocab.description(i);
        if (labels.contains(oracle_norm(desc))) {
            ++expected["exact"];
            continue;
        }
        const auto alias = scenario["embedding_aliases"].find(desc);
        if (alias == scenario["embedding_aliases"].end()) {
            ++expected["rejected"];
            continue;
        }
        // Blend of near-orthogonal vectors: cosine to the heaviest target ~ w_max / |w|.
        double sq = 0.0, wmax = 0.0;
        for (const auto& [k, w] : alias->items()) {
            sq += w.get<double>() * w.get<double>();
            wmax = std::max(wmax, w.get<double>());
        }
        if (!(wmax / std::sqrt(sq) > 0.85)) {
            ++expected["rejected"];
            continue;
        }
        std::string reply;
        for (const auto& rule : scenario["rules"]) {
            if (rule["tag"] != "entity_select") continue;
            if (rule.contains("contains") && rule["contains"] != "ICD-9 description: " + desc) continue;
            reply = rule["reply"];
            break;
        }
        const auto verdict = json::parse(reply);
        if (verdict["verdict"] == "confirm") ++expected["llm_validated"];
        else if (verdict["verdict"] == "reject") ++expected["rejected"];
        else if (graph.has_node(verdict["node_id"])) ++expected["llm_revised"];
        else ++expected["rejected"];
    }
    for (const auto& stage : {"exact", "similarity", "llm_validated", "llm_revised", "rejected"}) {
        CHECK_MESSAGE(result.stage_counts.at(stage) == expected[stage], stage);
    }
    CHECK(result.records.size() == vocab.size());
    CHECK(result.disease_nodes.at("pneumonia") == "disease:pneumonia");
    CHECK(result.disease_nodes.at("essential_hypertension") == "disease:essential_hypertension");

    // Vocabulary order, and the revision guard.
    for (std::size_t i = 0; i < vocab.size(); ++i) CHECK(result.records[i].code == vocab.codes()[i]);
    for (const auto& r : result.records) {
        if (r.code == "038.9") CHECK(r.node_id == std::optional<std::string>("disease:sepsis"));
        if (r.code == "487.1") CHECK(r.note == "out-of-candidate revision");
    }

    // Byte-identical re-run with a fresh gateway.
    auto again = fixture_gateway(1);
    CHECK(mapping_to_jsonl(run_alignment(vocab, graph, *again, prompts.entity_select, config).records) ==
          mapping_to_jsonl(result.records));
}

TEST_CASE("all-rejecting validator leaves only exact matches") {
    auto scenario = json::parse(read_file(kFixtureDir / "scenario.json"));
    scenario["rules"] = json::array({{{"tag", "entity_select"}, {"reply", R"({"verdict":"reject","reason":"no"})"}}});
    auto gateway = scenario_gateway(scenario.dump());
    const auto result = run_alignment(fixture_vocab(), fixture_graph(), *gateway, fixture_prompts().entity_select, {});
    CHECK(result.stage_counts.at("exact") + result.stage_counts.at("rejected") == result.records.size());
    CHECK(result.stage_counts.at("exact") == 7);
}

TEST_CASE("provider failure during validation rejects with a note") {
    auto scenario = json::parse(read_file(kFixtureDir / "scenario.json"));
    scenario["rules"] = json::array({{{"tag", "entity_select"}, {"fail", true}}});
    auto gateway = scenario_gateway(scenario.dump());
    const auto result = run_alignment(fixture_vocab(), fixture_graph(), *gateway, fixture_prompts().entity_select, {});
    std::size_t failures = 0;
    for (const auto& r : result.records) failures += r.note.starts_with("provider failure");
    CHECK(failures == 11);
}

TEST_CASE("unresolvable disease target is a hard error") {
    auto gateway = fixture_gateway();
    AlignmentConfig config;
    config.diseases = {{"x", "Nonexistent syndrome", ""}};
    CHECK_THROWS_AS(run_alignment(fixture_vocab(), fixture_graph(), *gateway, fixture_prompts().entity_select, config),
                    InputError);
    config.diseases = {{"x", "whatever", "disease:missing"}};
    CHECK_THROWS_AS(run_alignment(fixture_vocab(), fixture_graph(), *gateway, fixture_prompts().entity_select, config),
                    InputError);
    config.diseases = {{"x", "whatever", "disease:asthma"}};
    CHECK(run_alignment(fixture_vocab(), fixture_graph(), *gateway, fixture_prompts().entity_select, config)
              .disease_nodes.at("x") == "disease:asthma");
}

TEST_CASE("mapping.jsonl round trip and invariants") {
    const std::vector<MappingRecord> records{{"a", "n1", MappingStage::exact, 1.0, ""},
                                             {"b", std::nullopt, MappingStage::rejected, 0.5, "x"}};
    const auto text = mapping_to_jsonl(records);
    CHECK(text.substr(0, text.find('\n')) == R"({"code":"a","node_id":"n1","stage":"exact","score":1.0,"note":""})");
    CHECK(mapping_from_jsonl(text) == records);
    CHECK_THROWS_AS(mapping_from_jsonl(R"({"code":"a","node_id":null,"stage":"exact","score":1.0})"), InputError);
    CHECK_THROWS_AS(mapping_from_jsonl("\n{oops"), InputError);
}

TEST_CASE("fuzz: stage precedence, containment, score sanity, accounting") {
    const auto violations = alignment_fuzz_violations(97, 500);
    CHECK_MESSAGE(violations.empty(), violations.size() << " violations, first: " << (violations.empty() ? "" : violations.front()));
}
