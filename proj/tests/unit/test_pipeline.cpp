#include "kgcot/common.hpp"
#include "kgcot/pipeline.hpp"

#include "../support/fixture_env.hpp"
#include "../support/process.hpp"
#include "../support/temp_dir.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <set>

using namespace kgcot;
using namespace kgcot::testing;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kConfig = kFixtureDir / "config.json";

PipelineConfig fixture_config(const fs::path& out) {
    ConfigOverrides o;
    o.out_dir = out;
    return load_config(kConfig, o);
}

// Config with the fixture paths and nothing else.
std::string bare_config(const std::string& extra = "") {
    json j = {{"paths",
               {{"kg_nodes", (kFixtureDir / "kg_mini/nodes.tsv").string()},
                {"kg_edges", (kFixtureDir / "kg_mini/edges.tsv").string()},
                {"vocab", (kFixtureDir / "vocab.tsv").string()},
                {"cohort", (kFixtureDir / "cohort_mini.jsonl").string()},
                {"label_map", (kFixtureDir / "label_map.tsv").string()},
                {"prompts", kPromptDir.string()}}},
              {"provider", {{"kind", "mock"}, {"scenario", (kFixtureDir / "scenario.json").string()}, {"backoff_ms", 0}}}};
    if (!extra.empty()) j.merge_patch(json::parse(extra));
    return j.dump(2);
}

} // namespace

TEST_CASE("load_config: defaults and relative paths") {
    TempDir dir;
    dir.write("conf/c.json", R"({"paths": {"vocab": "../data/v.tsv"}})");
    const auto c = load_config(dir / "conf/c.json");
    CHECK(c.vocab == (dir.path() / "data/v.tsv").lexically_normal());
    CHECK(c.out_dir == (dir.path() / "conf/out").lexically_normal());
    CHECK(c.alignment.tau == 0.85);
    CHECK(c.alignment.candidates == 20);
    CHECK(c.evidence.k_node == 8);
    CHECK(c.evidence.k_path == 5);
    CHECK(c.evidence.max_hops == 5);
    CHECK(c.evidence.max_paths_per_pair == 64);
    CHECK(c.test_frac == 0.10);
    CHECK(c.train_sizes == std::vector<std::size_t>{400, 1000});
    CHECK(c.threshold == 0.5);
    CHECK(c.alignment.diseases.size() == 10);
    CHECK(c.cache_dir == c.out_dir / "cache");

    ConfigOverrides o;
    o.seed = 99;
    o.out_dir = dir / "elsewhere";
    const auto c2 = load_config(dir / "conf/c.json", o);
    CHECK(c2.seed == 99);
    CHECK(c2.out_dir == dir / "elsewhere");
}

TEST_CASE("load_config: errors and env overrides") {
    TempDir dir;
    CHECK_THROWS_AS(load_config(dir / "missing.json"), InputError);
    dir.write("typo.json", R"({"parameters": {"kk_node": 3}})");
    CHECK_THROWS_AS(load_config(dir / "typo.json"), InputError);
    dir.write("bad.json", "{not json");
    CHECK_THROWS_AS(load_config(dir / "bad.json"), InputError);
    dir.write("split.json", R"({"parameters": {"train_sizes": [10], "cot_train_size": 20}})");
    CHECK_THROWS_AS(load_config(dir / "split.json"), InputError);

    dir.write("ok.json", "{}");
    ::setenv("KGCOT_CACHE_DIR", (dir / "shared-cache").c_str(), 1);
    ::setenv("KGCOT_API_BASE", "http://example.invalid/v1", 1);
    const auto c = load_config(dir / "ok.json");
    ::unsetenv("KGCOT_CACHE_DIR");
    ::unsetenv("KGCOT_API_BASE");
    CHECK(c.cache_dir == dir / "shared-cache");
    CHECK(c.provider.cache_dir == dir / "shared-cache");
    CHECK(c.provider.base_url == "http://example.invalid/v1");
}

TEST_CASE("run-all on the fixtures: outputs, goldens and determinism") {
    TempDir a, b;
    const auto start = std::chrono::steady_clock::now();
    {
        Pipeline p(fixture_config(a.path()));
        p.run_all();
        p.write_audit();
    }
    {
        Pipeline p(fixture_config(b.path()));
        p.run_all();
        p.write_audit();
    }
    const auto elapsed = std::chrono::steady_clock::now() - start;
    CHECK(elapsed < std::chrono::seconds(60));

    for (const auto* name : {"mapping.jsonl", "evidence/pneumonia.json", "evidence/essential_hypertension.json",
                             "cohort/splits.json", "cohort/cases.jsonl", "cot/corpus.jsonl", "cot/generations.jsonl",
                             "cot/report.json", "metrics.json", "metrics.csv"}) {
        INFO(name);
        REQUIRE(fs::exists(a / name));
        CHECK(slurp(a / name) == slurp(b / name));
    }

    SUBCASE("mapping matches the hand-traced golden") {
        const auto golden = read_lines(kFixtureDir / "golden/mapping_fields.tsv");
        const auto mapping = load_mapping(a / "mapping.jsonl");
        REQUIRE(mapping.size() + 1 == golden.size());
        for (std::size_t i = 0; i < mapping.size(); ++i) {
            const auto f = split(golden[i + 1], '\t');
            const auto& r = mapping[i];
            INFO(r.code);
            CHECK(r.code == f[0]);
            CHECK(r.node_id.value_or("-") == f[1]);
            CHECK(to_string(r.stage) == f[2]);
            const auto note = f.size() > 3 ? f[3] : std::string();
            if (!note.empty() && note.back() == '*') CHECK(r.note.rfind(note.substr(0, note.size() - 1), 0) == 0);
            else CHECK(r.note == note);
            if (r.stage == MappingStage::exact) CHECK(r.score == 1.0);
        }
    }
    SUBCASE("evidence files equal the golden evidence") {
        CHECK(slurp(a / "evidence/pneumonia.json") == slurp(kFixtureDir / "golden/evidence_pneumonia.json"));
        CHECK(slurp(a / "evidence/essential_hypertension.json") ==
              slurp(kFixtureDir / "golden/evidence_essential_hypertension.json"));
    }
    SUBCASE("chain-of-thought accounting and train split") {
        const auto report = json::parse(slurp(a / "cot/report.json"));
        const auto split = splits_from_json(slurp(a / "cohort/splits.json"));
        CHECK(report["generated"] == split.train.at(20).size() * 2);
        CHECK(report["generated"].get<std::size_t>() ==
              report["kept"].get<std::size_t>() + report["dropped_mismatch"].get<std::size_t>() +
                  report["dropped_unparseable"].get<std::size_t>() + report["failed"].get<std::size_t>());
        CHECK(read_lines(a / "cot/corpus.jsonl").size() == report["kept"].get<std::size_t>());
        CHECK(report["provenance"]["train_split"] == "train_20");
    }
    SUBCASE("metrics cover the three predicted diseases") {
        const auto m = json::parse(slurp(a / "metrics.json"));
        CHECK(m["per_disease"].size() == 3);
        double sum = 0;
        for (const auto& [d, v] : m["per_disease"].items()) sum += v["aupr"].get<double>();
        CHECK(m["macro"]["aupr"].get<double>() == doctest::Approx(sum / 3).epsilon(1e-12));
    }
    SUBCASE("audit files") {
        const auto resolved = json::parse(slurp(a / "resolved-config.json"));
        CHECK(resolved["parameters"]["train_sizes"] == json::array({10, 20}));
        CHECK(resolved["templates"]["cot_gen"] == "cot_gen@1");
        const auto stats = json::parse(slurp(a / "provider-stats.json"));
        CHECK(stats["chat_calls"].get<int>() > 0);
    }
}

TEST_CASE("a warm cache serves a re-run without provider calls") {
    TempDir out;
    {
        Pipeline p(fixture_config(out.path()));
        p.map_entities();
        p.mine_evidence();
        CHECK(p.provider_stats()->chat_calls > 0);
    }
    const auto first = slurp(out / "evidence/pneumonia.json");
    Pipeline again(fixture_config(out.path()));
    again.mine_evidence();
    const auto stats = *again.provider_stats();
    CHECK(stats.chat_calls == 0);
    CHECK(stats.embed_calls == 0);
    CHECK(stats.chat_cache_hits > 0);
    CHECK(slurp(out / "evidence/pneumonia.json") == first);
}

TEST_CASE("a disease with no selected paths still gets an evidence file") {
    TempDir dir;
    auto scenario = json::parse(slurp(kFixtureDir / "scenario.json"));
    auto& rules = scenario["rules"];
    rules.insert(rules.begin(), json{{"tag", "path_select"}, {"contains", "Target disease: Shock"}, {"reply", "none"}});
    rules.insert(rules.begin(), json{{"tag", "node_select"}, {"contains", "Target disease: Shock"}, {"reply", "[\"phenotype:fever\"]"}});
    dir.write("scenario.json", scenario.dump(2));
    dir.write("c.json", bare_config(R"({"diseases": [{"disease_id": "shock", "name": "Shock"}], "parameters": {"max_hops": 1}, "provider": {"scenario": ")" +
                                    (dir / "scenario.json").string() + R"("}})"));
    ConfigOverrides o;
    o.out_dir = dir / "out";
    Pipeline p(load_config(dir / "c.json", o));
    p.map_entities();
    const auto evidence = p.mine_evidence();
    REQUIRE(fs::exists(dir / "out/evidence/shock.json"));
    const auto& e = evidence.at("shock");
    CHECK(e.paths.empty());
    CHECK(std::find(e.flags.begin(), e.flags.end(), "no_path:phenotype:fever") != e.flags.end());
}

TEST_CASE("one poisoned generation is counted as failed when fail_fast is off") {
    TempDir dir;
    // Reference run to pick a unit and read back its prompt lines.
    Pipeline ref(fixture_config(dir / "ref"));
    ref.run_all();
    const auto corpus_line = read_lines(dir / "ref/cot/corpus.jsonl").front();
    const auto sample = json::parse(corpus_line);
    const auto user = sample["messages"][1]["content"].get<std::string>();
    std::vector<std::string> lines;
    for (const auto& l : split(user, '\n')) {
        if (!trim(l).empty()) lines.push_back(l);
    }

    // Oracle: how many generation prompts contain every one of those lines.
    const auto mapping = load_mapping(dir / "ref/mapping.jsonl");
    const auto graph = fixture_graph();
    const auto vocab = fixture_vocab();
    const auto prompts = fixture_prompts();
    const auto split_ids = splits_from_json(slurp(dir / "ref/cohort/splits.json")).train.at(20);
    const std::set<std::string> members(split_ids.begin(), split_ids.end());
    std::size_t expected_failed = 0;
    for (const auto& c : load_cases(dir / "ref/cohort/cases.jsonl")) {
        if (!members.count(c.case_id)) continue;
        for (const auto* d : {"essential_hypertension", "pneumonia"}) {
            const auto ev = load_evidence(dir / "ref/evidence" / (std::string(d) + ".json"));
            const auto ctx = build_context(c, ev, mapping, vocab, graph);
            const auto rendered = render_prompt(ctx, prompts.cot_gen, true);
            std::string all;
            for (const auto& m : rendered) all += m.content + "\n";
            if (std::all_of(lines.begin(), lines.end(), [&](const auto& l) { return all.find(l) != std::string::npos; }))
                ++expected_failed;
        }
    }
    REQUIRE(expected_failed >= 1);

    auto scenario = json::parse(slurp(kFixtureDir / "scenario.json"));
    scenario["rules"].insert(scenario["rules"].begin(), json{{"tag", "cot_gen"}, {"contains", lines}, {"fail", true}});
    dir.write("poison.json", scenario.dump());
    auto config = fixture_config(dir / "poisoned");
    config.provider.scenario = dir / "poison.json";
    config.provider.retries = 2;
    Pipeline p(config);
    p.run_all();
    const auto report = json::parse(slurp(dir / "poisoned/cot/report.json"));
    CHECK(report["failed"] == expected_failed);
    CHECK(report["generated"] == 40);
}

TEST_CASE("CLI exit codes") {
    TempDir dir;
    SUBCASE("success writes the audit files") {
        const auto r = run_cli({"run-all", "--config", kConfig.string(), "--out", (dir / "out").string()});
        CHECK_MESSAGE(r.exit_code == 0, r.output);
        CHECK(fs::exists(dir / "out/resolved-config.json"));
        CHECK(fs::exists(dir / "out/provider-stats.json"));
        CHECK(fs::exists(dir / "out/metrics.json"));
    }
    SUBCASE("missing vocab path names the path") {
        dir.write("c.json", bare_config(R"({"paths": {"vocab": "/nonexistent/vocab.tsv"}})"));
        const auto r = run_cli({"map-entities", "--config", (dir / "c.json").string(), "--out", (dir / "out").string()});
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("/nonexistent/vocab.tsv") != std::string::npos);
    }
    SUBCASE("unresolved disease target") {
        dir.write("c.json", bare_config(R"({"diseases": [{"disease_id": "x", "name": "Dragon pox"}]})"));
        const auto r = run_cli({"map-entities", "--config", (dir / "c.json").string(), "--out", (dir / "out").string()});
        CHECK(r.exit_code == 1);
    }
    SUBCASE("unreachable provider exits 2") {
        dir.write("c.json", bare_config(R"({"provider": {"kind": "openai_compatible", "base_url": "http://127.0.0.1:9/v1",
                                            "retries": 1, "timeout_s": 2, "scenario": null}})"));
        const auto r = run_cli({"map-entities", "--config", (dir / "c.json").string(), "--out", (dir / "out").string()},
                               "KGCOT_API_KEY=test-key");
        CHECK_MESSAGE(r.exit_code == 2, r.output);
    }
    SUBCASE("unknown flag and missing config") {
        CHECK(run_cli({"run-all", "--bogus"}).exit_code == 1);
        CHECK(run_cli({"run-all", "--config", (dir / "none.json").string()}).exit_code == 1);
    }
    SUBCASE("stage order is enforced") {
        const auto r = run_cli({"gen-cot", "--config", kConfig.string(), "--out", (dir / "fresh").string()});
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("map-entities") != std::string::npos);
    }
    SUBCASE("evaluate with an explicit predictions file") {
        dir.write("p.jsonl", R"({"case_id":"P000:0","disease_id":"pneumonia","probability":0.9})" "\n");
        const auto r = run_cli({"evaluate", "--config", kConfig.string(), "--out", (dir / "out").string(), "--predictions",
                                (dir / "p.jsonl").string()});
        CHECK_MESSAGE(r.exit_code == 0, r.output);
        const auto m = json::parse(slurp(dir / "out/metrics.json"));
        CHECK(m["records"] == 1);
    }
}

TEST_CASE("serve-study: busy port, scripted session and shutdown on SIGTERM") {
    TempDir dir;
    httplib::Server blocker;
    const int busy = blocker.bind_to_any_port("127.0.0.1");
    REQUIRE(busy > 0);
    const auto r = run_cli({"serve-study", "--config", kConfig.string(), "--out", (dir / "a").string(), "--port",
                            std::to_string(busy)});
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("in use") != std::string::npos);

    // Free port for the real run.
    const int port = free_port();
    ::setenv("KGCOT_STUDY_TOKEN", "tok", 1);
    ChildProcess child({"serve-study", "--config", kConfig.string(), "--out", (dir / "b").string(), "--port",
                        std::to_string(port)},
                       dir / "serve.log");
    ::unsetenv("KGCOT_STUDY_TOKEN");
    REQUIRE(child.started());
    httplib::Client client("127.0.0.1", port);
    client.set_connection_timeout(1, 0);
    bool up = false;
    for (int i = 0; i < 500 && !up; ++i) {
        if (auto res = client.Get("/api/health"); res && res->status == 200) up = true;
        else std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    REQUIRE_MESSAGE(up, slurp(dir / "serve.log"));

    json batch = json::array();
    for (const auto* d : {"clarity_coherence", "coverage_relevance", "correctness_soundness"})
        batch.push_back({{"comparison_id", "cmp-0002"}, {"annotator_id", "ann"}, {"dimension", d}, {"choice", "A"}});
    auto posted = client.Post("/api/study/preference", batch.dump(), "application/json");
    REQUIRE(posted);
    CHECK(posted->status == 200);
    auto report = client.Get("/api/study/report", {{"Authorization", "Bearer tok"}});
    REQUIRE(report);
    CHECK(report->status == 200);

    child.signal(SIGTERM);
    CHECK(child.wait() == 0);

    const auto study = load_study(dir / "b/study/study.json");
    CHECK(study.comparisons.size() == 6);
    CHECK(read_lines(dir / "b/study/preferences.jsonl").size() == 3);
    const auto replayed = report_to_json(tally(study, replay(study, dir / "b/study/preferences.jsonl")), study);
    CHECK(replayed.dump() == nlohmann::ordered_json::parse(report->body).dump());
    struct stat st {};
    REQUIRE(::stat((dir / "b/study/study.json").c_str(), &st) == 0);
    CHECK((st.st_mode & 0777) == 0600);
}
