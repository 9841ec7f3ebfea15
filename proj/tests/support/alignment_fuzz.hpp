#pragma once
// Randomized alignment runs against a label-matching oracle. Each broken
// invariant becomes one line in the returned list.

#include "fixture_env.hpp"

#include "kgcot/common.hpp"
#include "kgcot/entity_align.hpp"

#include <json.hpp>
#include <spdlog/fmt/fmt.h>

#include <algorithm>
#include <cctype>
#include <random>
#include <string>
#include <vector>

namespace kgcot::testing {

// Independent label normalization: lowercase ASCII, whitespace runs -> one space, trimmed.
inline std::string oracle_norm(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

// Checks stage precedence, candidate containment, score range and stage accounting.
// Validator replies mix confirms, in-graph revisions, out-of-graph revisions and garbage.
inline std::vector<std::string> alignment_fuzz_violations(std::uint64_t seed, int trials) {
    using json = nlohmann::json;
    std::vector<std::string> violations;
    auto fail = [&](int trial, const std::string& code, const std::string& what) {
        violations.push_back(fmt::format("trial {} code {}: {}", trial, code, what));
    };
    std::mt19937_64 rng(seed);
    const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "kappa", "sigma", "omega", "theta", "zeta", "iota"};
    const auto prompt = fixture_prompts().entity_select;
    for (int trial = 0; trial < trials; ++trial) {
        // Graph: distinct names, occasionally duplicated to exercise the tie rule.
        std::vector<KgNode> nodes;
        const auto n_nodes = 3 + rng() % 10;
        for (std::size_t i = 0; i < n_nodes; ++i) {
            std::string name = words[rng() % words.size()] + " " + std::to_string(rng() % 5);
            nodes.push_back({"n" + std::to_string(i), i % 3 == 0 ? "disease" : "gene", name, ""});
        }
        const auto graph = KnowledgeGraph::build(nodes, {});

        json scenario{{"embedding_dim", 24}, {"seed", trial}, {"rules", json::array()},
                      {"embedding_aliases", json::object()}};
        std::vector<std::pair<std::string, std::string>> entries;
        const auto n_vocab = 2 + rng() % 8;
        for (std::size_t i = 0; i < n_vocab; ++i) {
            const auto code = "c" + std::to_string(i);
            std::string desc;
            const auto& target = nodes[rng() % nodes.size()];
            switch (rng() % 3) {
            case 0: desc = "  " + to_lower(target.name) + " "; break; // exact after normalization
            case 1:
                desc = "term" + std::to_string(i) + " " + target.name + " variant";
                scenario["embedding_aliases"][desc] = {{target.name, 1.0}, {"noise" + std::to_string(i), (rng() % 100) / 100.0}};
                break;
            default: desc = "unrelated entry " + std::to_string(trial) + "-" + std::to_string(i); break;
            }
            entries.push_back({code, desc});
            std::string reply;
            switch (rng() % 4) {
            case 0: reply = R"({"verdict":"confirm"})"; break;
            case 1: reply = json{{"verdict", "revise"}, {"node_id", nodes[rng() % nodes.size()].id}}.dump(); break;
            case 2: reply = R"({"verdict":"revise","node_id":"ghost"})"; break;
            default: reply = "garbage"; break;
            }
            scenario["rules"].push_back({{"tag", "entity_select"}, {"contains", "ICD-9 description: " + desc + "\n"}, {"reply", reply}});
        }
        scenario["default_reply"] = R"({"verdict":"confirm"})";
        auto gateway = scenario_gateway(scenario.dump(), 1 + rng() % 4);
        AlignmentConfig config;
        config.candidates = 1 + rng() % 6;
        const auto result = run_alignment(Vocabulary(entries), graph, *gateway, prompt, config);

        if (result.records.size() != entries.size()) {
            fail(trial, "*", "record count differs from vocabulary size");
            continue;
        }
        std::size_t total = 0;
        for (const auto& [stage, count] : result.stage_counts) total += count;
        if (total != entries.size()) fail(trial, "*", "stage counts do not sum to the vocabulary size");

        const auto index = NodeEmbeddingIndex::build(graph, *gateway);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& r = result.records[i];
            const auto& code = entries[i].first;
            if (r.code != code) fail(trial, code, "record out of order");
            if (r.node_id.has_value() == (r.stage == MappingStage::rejected)) fail(trial, code, "node presence disagrees with stage");
            if (r.score < -1.0 || r.score > 1.0) fail(trial, code, fmt::format("score {} outside [-1, 1]", r.score));
            // Precedence: a label match is always the final answer.
            std::vector<std::string> same_label;
            for (const auto& n : nodes) {
                if (oracle_norm(n.name) == oracle_norm(entries[i].second)) same_label.push_back(n.id);
            }
            std::sort(same_label.begin(), same_label.end());
            if (!same_label.empty()) {
                if (r.stage != MappingStage::exact || r.score != 1.0 || !r.node_id || *r.node_id != same_label.front())
                    fail(trial, code, "label match not resolved as exact to the smallest id");
                continue;
            }
            if (r.node_id) {
                if (!graph.has_node(*r.node_id)) fail(trial, code, "mapped to a node outside the graph");
                const auto query = gateway->embed({entries[i].second}).front();
                if (!retrieve_candidates({r.code, entries[i].second}, query, index, config.candidates).contains(*r.node_id))
                    fail(trial, code, "mapped node outside the candidate set");
            }
        }
    }
    return violations;
}

} // namespace kgcot::testing
