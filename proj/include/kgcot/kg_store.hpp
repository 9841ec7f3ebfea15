#pragma once
// Heterogeneous directed multigraph loaded from node/edge tables.
//
// Nodes and edges are stored in flat vectors; adjacency is kept as per-node
// lists of edge indices in both directions. A loaded graph is immutable and
// safe for concurrent readers.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace kgcot {

struct KgNode {
    std::string id;
    std::string type;
    std::string name;
    std::string source;
};

struct KgEdge {
    std::string src;
    std::string dst;
    std::string relation;
    std::string display_relation;
};

enum class Orientation { forward, reverse };

const char* to_string(Orientation orientation);
Orientation orientation_from_string(const std::string& text);

// One hop of a reasoning path. Parallel edges between the same two nodes are
// folded into one step: `relation` is the representative, `relations` keeps
// every (relation, orientation) that connects the pair.
struct PathStep {
    std::string relation;
    std::string display_relation;
    Orientation orientation = Orientation::forward;
    std::vector<std::pair<std::string, Orientation>> relations;

    bool operator==(const PathStep&) const = default;
};

struct ReasoningPath {
    std::vector<std::string> nodes;
    std::vector<PathStep> steps;

    std::size_t length() const { return steps.size(); }
    bool operator==(const ReasoningPath&) const = default;
};

// Remaps third-party column names onto the canonical fields.
struct ColumnMap {
    std::string node_id = "node_id";
    std::string node_type = "node_type";
    std::string node_name = "node_name";
    std::string source = "source";
    std::string src_id = "src_id";
    std::string dst_id = "dst_id";
    std::string relation = "relation";
    std::string display_relation = "display_relation";
    char delimiter = '\t';
};

struct PathQuery {
    std::size_t max_hops = 5;
    std::size_t max_paths = 64;
    // Honor edge direction instead of walking the undirected skeleton.
    bool directed = false;
};

class KnowledgeGraph {
public:
    KnowledgeGraph() = default;

    // Validates referential integrity, rejects duplicate node ids, drops
    // duplicate (src, dst, relation) edges and builds all indices.
    static KnowledgeGraph build(std::vector<KgNode> nodes, std::vector<KgEdge> edges);

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t edge_count() const { return edges_.size(); }
    std::size_t duplicate_edges_dropped() const { return duplicates_dropped_; }

    const std::vector<KgNode>& nodes() const { return nodes_; }
    const std::vector<KgEdge>& edges() const { return edges_; }

    bool has_node(const std::string& id) const { return index_.contains(id); }
    const KgNode& node(const std::string& id) const;
    std::optional<std::size_t> node_index(const std::string& id) const;

    std::span<const std::size_t> out_edges(const std::string& id) const;
    std::span<const std::size_t> in_edges(const std::string& id) const;
    std::size_t out_degree(const std::string& id) const { return out_edges(id).size(); }
    std::size_t in_degree(const std::string& id) const { return in_edges(id).size(); }

    // Node ids whose normalized name equals normalize_label(name), ascending.
    std::vector<std::string> nodes_named(const std::string& name) const;

private:
    std::vector<KgNode> nodes_;
    std::vector<KgEdge> edges_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::vector<std::size_t>> out_;
    std::vector<std::vector<std::size_t>> in_;
    std::map<std::string, std::vector<std::string>> name_index_;
    std::size_t duplicates_dropped_ = 0;
};

KnowledgeGraph load_graph(const std::filesystem::path& node_table,
                          const std::filesystem::path& edge_table,
                          const ColumnMap& columns = {});

// All minimum-length src->dst paths within query.max_hops, in lexicographic
// node-id order, truncated to query.max_paths.
std::vector<ReasoningPath> all_shortest_paths(const KnowledgeGraph& graph,
                                              const std::string& src,
                                              const std::string& dst,
                                              const PathQuery& query = {});

// Union of path nodes and traversed edges.
KnowledgeGraph subgraph_for(const KnowledgeGraph& graph,
                            const std::vector<ReasoningPath>& paths);

} // namespace kgcot
