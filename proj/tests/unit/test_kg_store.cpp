#include "kgcot/common.hpp"
#include "kgcot/kg_store.hpp"

#include "../support/graph_oracle.hpp"
#include "../support/temp_dir.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace kgcot;
using kgcot::testing::TempDir;

namespace {

KnowledgeGraph make_graph(const std::vector<std::string>& ids,
                          const std::vector<std::tuple<std::string, std::string, std::string>>& edges) {
    std::vector<KgNode> nodes;
    for (const auto& id : ids) nodes.push_back({id, "t", "Name " + id, "test"});
    std::vector<KgEdge> es;
    for (const auto& [s, d, r] : edges) es.push_back({s, d, r, r});
    return KnowledgeGraph::build(nodes, es);
}

std::set<std::vector<std::string>> node_sets(const std::vector<ReasoningPath>& paths) {
    std::set<std::vector<std::string>> out;
    for (const auto& p : paths) out.insert(p.nodes);
    return out;
}

// Independent count: non-empty lines minus the header.
std::size_t count_rows(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) ++n;
    }
    return n - 1;
}

} // namespace

TEST_CASE("load_graph: three-node tables") {
    TempDir dir;
    auto nodes = dir.write("nodes.tsv",
                           "node_id\tnode_type\tnode_name\tsource\n"
                           "A\tdisease\tAlpha\tx\nB\tgene\tBeta\tx\nC\tdrug\tGamma\tx\n");
    auto edges = dir.write("edges.tsv",
                           "src_id\tdst_id\trelation\tdisplay_relation\n"
                           "A\tB\tr1\trelation one\nB\tC\tr2\trelation two\n");
    const auto g = load_graph(nodes, edges);
    CHECK(g.node_count() == 3);
    CHECK(g.edge_count() == 2);
    CHECK(g.out_degree("A") == 1);
    CHECK(g.in_degree("A") == 0);
    CHECK(g.node("B").type == "gene");
    CHECK(g.edges()[0].display_relation == "relation one");
}

TEST_CASE("load_graph: unknown node is reported with its row") {
    TempDir dir;
    auto nodes = dir.write("nodes.tsv", "node_id\tnode_type\tnode_name\tsource\nA\tt\tAlpha\tx\nB\tt\tBeta\tx\n");
    auto edges = dir.write("edges.tsv",
                           "src_id\tdst_id\trelation\tdisplay_relation\nA\tB\tr\tr\nB\tZ\tr\tr\n");
    try {
        (void)load_graph(nodes, edges);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("\"Z\"") != std::string::npos);
        CHECK(msg.find("row 3") != std::string::npos);
    }
}

TEST_CASE("load_graph: errors") {
    TempDir dir;
    auto edges = dir.write("edges.tsv", "src_id\tdst_id\trelation\tdisplay_relation\n");
    CHECK_THROWS_AS(load_graph(dir / "missing.tsv", edges), InputError);

    auto dup = dir.write("dup.tsv", "node_id\tnode_type\tnode_name\tsource\nA\tt\tAlpha\tx\nA\tt\tAgain\tx\n");
    CHECK_THROWS_WITH_AS(load_graph(dup, edges), doctest::Contains("duplicate node_id"), InputError);

    auto unnamed = dir.write("unnamed.tsv", "node_id\tnode_type\tnode_name\tsource\nA\tt\t \tx\n");
    CHECK_THROWS_AS(load_graph(unnamed, edges), InputError);

    auto no_col = dir.write("nocol.tsv", "id\tnode_type\tnode_name\tsource\nA\tt\tAlpha\tx\n");
    CHECK_THROWS_WITH_AS(load_graph(no_col, edges), doctest::Contains("node_id"), InputError);
}

TEST_CASE("load_graph: duplicate (src,dst,relation) rows are dropped, parallel relations kept") {
    TempDir dir;
    auto nodes = dir.write("nodes.tsv", "node_id\tnode_type\tnode_name\tsource\nA\tt\tAlpha\tx\nB\tt\tBeta\tx\n");
    auto edges = dir.write("edges.tsv",
                           "src_id\tdst_id\trelation\tdisplay_relation\n"
                           "A\tB\tr1\tr1\nA\tB\tr1\tr1\nA\tB\tr2\tr2\n");
    const auto g = load_graph(nodes, edges);
    CHECK(g.edge_count() == 2);
    CHECK(g.duplicate_edges_dropped() == 1);
}

TEST_CASE("load_graph: column map for a comma-separated export") {
    TempDir dir;
    auto nodes = dir.write("nodes.csv",
                           "node_index,node_id,node_type,node_name,node_source\n"
                           "0,1,disease,\"hypertension, essential\",MONDO\n1,2,gene/protein,ACE,NCBI\n");
    auto edges = dir.write("edges.csv", "x_id,y_id,relation,display_relation\n1,2,disease_protein,associated with\n");
    ColumnMap columns;
    columns.source = "node_source";
    columns.src_id = "x_id";
    columns.dst_id = "y_id";
    columns.delimiter = ',';
    const auto g = load_graph(nodes, edges, columns);
    CHECK(g.node_count() == 2);
    CHECK(g.node("1").name == "hypertension, essential");
    CHECK(g.nodes_named("Hypertension,  Essential") == std::vector<std::string>{"1"});
}

TEST_CASE("load_graph: kg_mini fixture counts match an independent row count") {
    const std::filesystem::path dir = KGCOT_FIXTURE_DIR "/kg_mini";
    const auto g = load_graph(dir / "nodes.tsv", dir / "edges.tsv");
    CHECK(g.node_count() == count_rows(dir / "nodes.tsv"));
    CHECK(g.edge_count() == count_rows(dir / "edges.tsv"));
    CHECK(g.node_count() == 40);
    CHECK(g.edge_count() == 96);
}

TEST_CASE("name index normalization") {
    const auto g = make_graph({"b", "a"}, {});
    CHECK(normalize_label("  Essential   Hypertension \t") == "essential hypertension");
    CHECK(normalize_label("Type-2, diabetes") == "type-2, diabetes");
    CHECK(g.nodes_named("name   A") == std::vector<std::string>{"a"});
    CHECK(g.nodes_named("missing").empty());
}

TEST_CASE("all_shortest_paths: direct edge beats two-hop routes") {
    const auto g = make_graph({"A", "B", "C", "D"},
                              {{"A", "B", "r"}, {"B", "D", "r"}, {"A", "C", "r"}, {"C", "D", "r"}, {"A", "D", "r"}});
    const auto paths = all_shortest_paths(g, "A", "D", {5, 64, false});
    REQUIRE(paths.size() == 1);
    CHECK(paths[0].nodes == std::vector<std::string>{"A", "D"});
    CHECK(paths[0].length() == 1);
}

TEST_CASE("all_shortest_paths: two equal-length routes, lexicographic order") {
    const auto g = make_graph({"A", "B", "C", "D"}, {{"A", "B", "r"}, {"B", "D", "r"}, {"A", "C", "r"}, {"C", "D", "r"}});
    const auto paths = all_shortest_paths(g, "A", "D", {5, 64, false});
    REQUIRE(paths.size() == 2);
    CHECK(paths[0].nodes == std::vector<std::string>{"A", "B", "D"});
    CHECK(paths[1].nodes == std::vector<std::string>{"A", "C", "D"});
    CHECK(node_sets(paths) == kgcot::testing::brute_force_shortest(
                                  {{"A", "B", "r", ""}, {"B", "D", "r", ""}, {"A", "C", "r", ""}, {"C", "D", "r", ""}},
                                  "A", "D", 5, false));
}

TEST_CASE("all_shortest_paths: hop bound") {
    std::vector<std::string> ids;
    std::vector<std::tuple<std::string, std::string, std::string>> edges;
    for (int i = 0; i < 7; ++i) ids.push_back("n" + std::to_string(i));
    for (int i = 0; i < 6; ++i) edges.emplace_back(ids[i], ids[i + 1], "next");
    const auto g = make_graph(ids, edges);
    CHECK(all_shortest_paths(g, "n0", "n6", {5, 64, false}).empty());
    const auto six = all_shortest_paths(g, "n0", "n6", {6, 64, false});
    REQUIRE(six.size() == 1);
    CHECK(six[0].length() == 6);
}

TEST_CASE("all_shortest_paths: errors") {
    const auto g = make_graph({"A", "B"}, {{"A", "B", "r"}});
    CHECK_THROWS_AS(all_shortest_paths(g, "A", "A"), InputError);
    CHECK_THROWS_AS(all_shortest_paths(g, "X", "B"), InputError);
    CHECK_THROWS_AS(all_shortest_paths(g, "A", "Y"), InputError);
    CHECK_THROWS_AS(all_shortest_paths(g, "A", "B", {0, 64, false}), InputError);
}

TEST_CASE("all_shortest_paths: orientation and parallel-edge folding") {
    // A -> B (two relations), D -> B: reaching D from A walks B->D backwards.
    const auto g = make_graph({"A", "B", "D"}, {{"A", "B", "zeta"}, {"A", "B", "alpha"}, {"D", "B", "binds"}});
    const auto paths = all_shortest_paths(g, "A", "D");
    REQUIRE(paths.size() == 1);
    const auto& p = paths[0];
    CHECK(p.nodes == std::vector<std::string>{"A", "B", "D"});
    REQUIRE(p.steps.size() == 2);
    CHECK(p.steps[0].relation == "alpha");
    CHECK(p.steps[0].orientation == Orientation::forward);
    CHECK(p.steps[0].relations.size() == 2);
    CHECK(p.steps[1].relation == "binds");
    CHECK(p.steps[1].orientation == Orientation::reverse);

    SUBCASE("strict directed search refuses the reverse hop") {
        CHECK(all_shortest_paths(g, "A", "D", {5, 64, true}).empty());
        CHECK(all_shortest_paths(g, "A", "B", {5, 64, true}).size() == 1);
    }
}

TEST_CASE("all_shortest_paths: truncation keeps the lexicographic prefix") {
    // Source s fans out to m0..m9, each reaching t.
    std::vector<std::string> ids{"s", "t"};
    std::vector<std::tuple<std::string, std::string, std::string>> edges;
    for (int i = 9; i >= 0; --i) {
        const auto mid = "m" + std::to_string(i);
        ids.push_back(mid);
        edges.emplace_back("s", mid, "r");
        edges.emplace_back(mid, "t", "r");
    }
    const auto g = make_graph(ids, edges);
    const auto all = all_shortest_paths(g, "s", "t", {5, 64, false});
    CHECK(all.size() == 10);
    const auto capped = all_shortest_paths(g, "s", "t", {5, 3, false});
    REQUIRE(capped.size() == 3);
    CHECK(capped[0].nodes[1] == "m0");
    CHECK(capped[1].nodes[1] == "m1");
    CHECK(capped[2].nodes[1] == "m2");
    CHECK(std::equal(capped.begin(), capped.end(), all.begin()));
}

TEST_CASE("all_shortest_paths properties on random multigraphs") {
    std::mt19937_64 rng(4242);
    for (int trial = 0; trial < 150; ++trial) {
        const auto rg = kgcot::testing::random_multigraph(rng);
        const auto& g = rg.graph;
        std::size_t out_sum = 0, in_sum = 0;
        for (const auto& n : g.nodes()) {
            out_sum += g.out_degree(n.id);
            in_sum += g.in_degree(n.id);
        }
        CHECK(out_sum == g.edge_count());
        CHECK(in_sum == g.edge_count());

        std::uniform_int_distribution<std::size_t> pick(0, g.node_count() - 1);
        for (int q = 0; q < 4; ++q) {
            const auto& src = g.nodes()[pick(rng)].id;
            auto dst = g.nodes()[pick(rng)].id;
            if (src == dst) continue;
            const bool directed = (q % 2) == 1;
            const std::size_t hops = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
            const auto got = all_shortest_paths(g, src, dst, {hops, 100000, directed});
            const auto expected = kgcot::testing::brute_force_shortest(rg.edges, src, dst, hops, directed);
            CHECK(node_sets(got) == expected);
            CHECK(got.size() == expected.size());
            for (const auto& p : got) {
                CHECK(p.length() <= hops);
                CHECK(p.length() + 1 == p.nodes.size());
                CHECK(std::set<std::string>(p.nodes.begin(), p.nodes.end()).size() == p.nodes.size());
            }
            CHECK(std::is_sorted(got.begin(), got.end(),
                                 [](const ReasoningPath& a, const ReasoningPath& b) { return a.nodes < b.nodes; }));
            CHECK(all_shortest_paths(g, src, dst, {hops, 100000, directed}) == got);
        }
    }
}

TEST_CASE("subgraph_for") {
    const auto g = make_graph({"A", "B", "C", "D"}, {{"A", "B", "r"}, {"B", "D", "r"}, {"A", "C", "r"}, {"C", "D", "r"}});
    CHECK(subgraph_for(g, {}).node_count() == 0);
    CHECK(subgraph_for(g, {}).edge_count() == 0);

    const auto paths = all_shortest_paths(g, "A", "D");
    REQUIRE(paths.size() == 2);
    const auto one = subgraph_for(g, {paths[0]});
    CHECK(one.node_count() == 3);
    CHECK(one.edge_count() == 2);

    // Paths sharing A and D: set union, not a sum.
    const auto both = subgraph_for(g, paths);
    std::set<std::string> node_union;
    std::set<std::pair<std::string, std::string>> edge_union;
    for (const auto& p : paths) {
        node_union.insert(p.nodes.begin(), p.nodes.end());
        for (std::size_t i = 0; i + 1 < p.nodes.size(); ++i) edge_union.emplace(p.nodes[i], p.nodes[i + 1]);
    }
    CHECK(both.node_count() == node_union.size());
    CHECK(both.edge_count() == edge_union.size());
    std::size_t out_sum = 0;
    for (const auto& n : both.nodes()) out_sum += both.out_degree(n.id);
    CHECK(out_sum == both.edge_count());

    ReasoningPath bogus{{"A", "Q"}, {PathStep{"r", "r", Orientation::forward, {}}}};
    CHECK_THROWS_AS(subgraph_for(g, {bogus}), InputError);
}
