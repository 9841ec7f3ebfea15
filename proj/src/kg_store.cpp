#include "kgcot/kg_store.hpp"

#include "kgcot/common.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

namespace kgcot {

const char* to_string(Orientation orientation) {
    return orientation == Orientation::forward ? "forward" : "reverse";
}

Orientation orientation_from_string(const std::string& text) {
    if (text == "forward") return Orientation::forward;
    if (text == "reverse") return Orientation::reverse;
    throw InputError("invalid orientation: " + text);
}

KnowledgeGraph KnowledgeGraph::build(std::vector<KgNode> nodes, std::vector<KgEdge> edges) {
    KnowledgeGraph graph;
    graph.nodes_ = std::move(nodes);
    graph.index_.reserve(graph.nodes_.size());
    for (std::size_t i = 0; i < graph.nodes_.size(); ++i) {
        const auto& node = graph.nodes_[i];
        if (node.id.empty()) throw InputError("node with empty node_id");
        if (trim(node.name).empty()) throw InputError("node " + node.id + " has an empty node_name");
        if (!graph.index_.emplace(node.id, i).second) {
            throw InputError("duplicate node_id: " + node.id);
        }
        graph.name_index_[normalize_label(node.name)].push_back(node.id);
    }
    for (auto& [name, ids] : graph.name_index_) std::sort(ids.begin(), ids.end());

    std::ostringstream unknown;
    std::size_t unknown_count = 0;
    for (std::size_t row = 0; row < edges.size(); ++row) {
        for (const auto* end : {&edges[row].src, &edges[row].dst}) {
            if (!graph.index_.contains(*end)) {
                unknown << (unknown_count++ ? "; " : "") << "edge " << row << " references unknown node \""
                        << *end << "\"";
            }
        }
    }
    if (unknown_count) throw InputError(unknown.str());

    std::set<std::tuple<std::string, std::string, std::string>> seen;
    graph.edges_.reserve(edges.size());
    for (auto& edge : edges) {
        if (!seen.emplace(edge.src, edge.dst, edge.relation).second) {
            ++graph.duplicates_dropped_;
            continue;
        }
        graph.edges_.push_back(std::move(edge));
    }

    graph.out_.assign(graph.nodes_.size(), {});
    graph.in_.assign(graph.nodes_.size(), {});
    for (std::size_t e = 0; e < graph.edges_.size(); ++e) {
        graph.out_[graph.index_.at(graph.edges_[e].src)].push_back(e);
        graph.in_[graph.index_.at(graph.edges_[e].dst)].push_back(e);
    }
    return graph;
}

const KgNode& KnowledgeGraph::node(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw InputError("unknown node: " + id);
    return nodes_[it->second];
}

std::optional<std::size_t> KnowledgeGraph::node_index(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::span<const std::size_t> KnowledgeGraph::out_edges(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw InputError("unknown node: " + id);
    return out_[it->second];
}

std::span<const std::size_t> KnowledgeGraph::in_edges(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw InputError("unknown node: " + id);
    return in_[it->second];
}

std::vector<std::string> KnowledgeGraph::nodes_named(const std::string& name) const {
    const auto it = name_index_.find(normalize_label(name));
    if (it == name_index_.end()) return {};
    return it->second;
}

namespace {

struct Table {
    std::vector<std::string> header;
    std::vector<std::pair<std::size_t, std::vector<std::string>>> rows; // (line number, fields)
};

Table read_table(const std::filesystem::path& path, char delimiter) {
    if (!std::filesystem::exists(path)) throw InputError("missing file: " + path.string());
    const bool quoted = delimiter != '\t';
    const auto lines = read_lines(path);
    Table table;
    std::size_t line_no = 0;
    for (const auto& line : lines) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = split_record(line, delimiter, quoted);
        if (table.header.empty()) {
            if (!fields.empty() && fields[0].starts_with("\xEF\xBB\xBF")) fields[0].erase(0, 3);
            table.header = std::move(fields);
            continue;
        }
        table.rows.emplace_back(line_no, std::move(fields));
    }
    if (table.header.empty()) throw InputError("empty table: " + path.string());
    return table;
}

std::size_t column(const Table& table, const std::string& name, const std::filesystem::path& path,
                   bool required = true) {
    const auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) {
        if (!required) return SIZE_MAX;
        throw InputError(path.string() + ": missing column \"" + name + "\"");
    }
    return static_cast<std::size_t>(it - table.header.begin());
}

const std::string& field(const std::vector<std::string>& row, std::size_t col, std::size_t line_no,
                         const std::filesystem::path& path) {
    static const std::string empty;
    if (col == SIZE_MAX) return empty;
    if (col >= row.size()) {
        throw InputError(path.string() + ": line " + std::to_string(line_no) + " has too few fields");
    }
    return row[col];
}

} // namespace

KnowledgeGraph load_graph(const std::filesystem::path& node_table,
                          const std::filesystem::path& edge_table, const ColumnMap& columns) {
    const auto node_rows = read_table(node_table, columns.delimiter);
    const auto edge_rows = read_table(edge_table, columns.delimiter);

    const auto id_col = column(node_rows, columns.node_id, node_table);
    const auto type_col = column(node_rows, columns.node_type, node_table);
    const auto name_col = column(node_rows, columns.node_name, node_table);
    const auto source_col = column(node_rows, columns.source, node_table, false);

    std::vector<KgNode> nodes;
    nodes.reserve(node_rows.rows.size());
    std::set<std::string> ids;
    for (const auto& [line_no, row] : node_rows.rows) {
        KgNode node{field(row, id_col, line_no, node_table), field(row, type_col, line_no, node_table),
                    field(row, name_col, line_no, node_table),
                    field(row, source_col, line_no, node_table)};
        if (!ids.insert(node.id).second) {
            throw InputError(node_table.string() + ": duplicate node_id \"" + node.id + "\" at line " +
                             std::to_string(line_no));
        }
        nodes.push_back(std::move(node));
    }

    const auto src_col = column(edge_rows, columns.src_id, edge_table);
    const auto dst_col = column(edge_rows, columns.dst_id, edge_table);
    const auto rel_col = column(edge_rows, columns.relation, edge_table);
    const auto display_col = column(edge_rows, columns.display_relation, edge_table, false);

    std::vector<KgEdge> edges;
    edges.reserve(edge_rows.rows.size());
    std::ostringstream unknown;
    std::size_t unknown_count = 0;
    for (const auto& [line_no, row] : edge_rows.rows) {
        KgEdge edge{field(row, src_col, line_no, edge_table), field(row, dst_col, line_no, edge_table),
                    field(row, rel_col, line_no, edge_table),
                    field(row, display_col, line_no, edge_table)};
        if (edge.display_relation.empty()) edge.display_relation = edge.relation;
        for (const auto* end : {&edge.src, &edge.dst}) {
            if (!ids.contains(*end)) {
                unknown << (unknown_count++ ? "; " : "") << "row " << line_no << ": unknown node \""
                        << *end << "\"";
            }
        }
        edges.push_back(std::move(edge));
    }
    if (unknown_count) {
        throw InputError(edge_table.string() + ": edges reference unknown nodes: " + unknown.str());
    }
    return KnowledgeGraph::build(std::move(nodes), std::move(edges));
}

namespace {

// Neighbors of u in traversal order; `backward` walks predecessor links.
void collect_neighbors(const KnowledgeGraph& graph, const std::string& id, bool directed, bool backward,
                       std::vector<std::string>& out) {
    out.clear();
    const auto& edges = graph.edges();
    if (!backward || !directed) {
        for (auto e : graph.out_edges(id)) out.push_back(edges[e].dst);
    }
    if (backward || !directed) {
        for (auto e : graph.in_edges(id)) out.push_back(edges[e].src);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
}

std::unordered_map<std::string, std::size_t> bfs_distances(const KnowledgeGraph& graph,
                                                           const std::string& start,
                                                           const std::string* stop_at,
                                                           std::size_t limit, bool directed,
                                                           bool backward) {
    std::unordered_map<std::string, std::size_t> dist{{start, 0}};
    std::deque<std::string> queue{start};
    std::vector<std::string> neighbors;
    while (!queue.empty()) {
        auto u = std::move(queue.front());
        queue.pop_front();
        const auto du = dist.at(u);
        if (du >= limit) continue;
        if (stop_at && dist.contains(*stop_at) && du >= dist.at(*stop_at)) break;
        collect_neighbors(graph, u, directed, backward, neighbors);
        for (auto& v : neighbors) {
            if (dist.emplace(v, du + 1).second) queue.push_back(v);
        }
    }
    return dist;
}

PathStep make_step(const KnowledgeGraph& graph, const std::string& from, const std::string& to,
                   bool directed) {
    struct Link {
        Orientation orientation;
        std::string relation;
        std::string display;
    };
    std::vector<Link> links;
    const auto& edges = graph.edges();
    for (auto e : graph.out_edges(from)) {
        if (edges[e].dst == to) links.push_back({Orientation::forward, edges[e].relation, edges[e].display_relation});
    }
    if (!directed) {
        for (auto e : graph.in_edges(from)) {
            if (edges[e].src == to) {
                links.push_back({Orientation::reverse, edges[e].relation, edges[e].display_relation});
            }
        }
    }
    std::sort(links.begin(), links.end(), [](const Link& a, const Link& b) {
        return std::tie(a.orientation, a.relation) < std::tie(b.orientation, b.relation);
    });
    PathStep step;
    step.relation = links.front().relation;
    step.display_relation = links.front().display;
    step.orientation = links.front().orientation;
    for (const auto& link : links) step.relations.emplace_back(link.relation, link.orientation);
    return step;
}

} // namespace

std::vector<ReasoningPath> all_shortest_paths(const KnowledgeGraph& graph, const std::string& src,
                                              const std::string& dst, const PathQuery& query) {
    if (!graph.has_node(src)) throw InputError("unknown source node: " + src);
    if (!graph.has_node(dst)) throw InputError("unknown target node: " + dst);
    if (src == dst) throw InputError("source and target are the same node: " + src);
    if (query.max_hops == 0) throw InputError("max_hops must be >= 1");
    if (query.max_paths == 0) return {};

    const auto forward = bfs_distances(graph, src, &dst, query.max_hops, query.directed, false);
    const auto found = forward.find(dst);
    if (found == forward.end()) return {};
    const auto distance = found->second;
    const auto to_target = bfs_distances(graph, dst, nullptr, distance, query.directed, true);

    std::vector<ReasoningPath> paths;
    std::vector<std::string> prefix{src};
    std::vector<std::vector<std::string>> scratch(distance + 1);

    // Depth-first over the shortest-path DAG with sorted successors yields
    // node sequences in lexicographic order, so truncation is a prefix.
    auto extend = [&](auto&& self, std::size_t depth) -> void {
        if (paths.size() >= query.max_paths) return;
        const auto& u = prefix.back();
        if (depth == distance) {
            ReasoningPath path;
            path.nodes = prefix;
            for (std::size_t i = 0; i + 1 < prefix.size(); ++i) {
                path.steps.push_back(make_step(graph, prefix[i], prefix[i + 1], query.directed));
            }
            paths.push_back(std::move(path));
            return;
        }
        auto& next = scratch[depth];
        collect_neighbors(graph, u, query.directed, false, next);
        const auto remaining = distance - depth - 1;
        std::vector<std::string> successors;
        for (const auto& v : next) {
            const auto it = to_target.find(v);
            if (it != to_target.end() && it->second == remaining) successors.push_back(v);
        }
        for (const auto& v : successors) {
            prefix.push_back(v);
            self(self, depth + 1);
            prefix.pop_back();
            if (paths.size() >= query.max_paths) return;
        }
    };
    extend(extend, 0);
    return paths;
}

KnowledgeGraph subgraph_for(const KnowledgeGraph& graph, const std::vector<ReasoningPath>& paths) {
    std::set<std::string> node_ids;
    std::set<std::tuple<std::string, std::string, std::string>> edge_keys;
    for (const auto& path : paths) {
        if (path.nodes.size() != path.steps.size() + 1) {
            throw InputError("malformed path: node/step count mismatch");
        }
        for (const auto& id : path.nodes) {
            if (!graph.has_node(id)) throw InputError("path references node absent from graph: " + id);
            node_ids.insert(id);
        }
        for (std::size_t i = 0; i < path.steps.size(); ++i) {
            const auto& step = path.steps[i];
            auto links = step.relations;
            if (links.empty()) links.emplace_back(step.relation, step.orientation);
            for (const auto& [relation, orientation] : links) {
                const auto& from = orientation == Orientation::forward ? path.nodes[i] : path.nodes[i + 1];
                const auto& to = orientation == Orientation::forward ? path.nodes[i + 1] : path.nodes[i];
                edge_keys.emplace(from, to, relation);
            }
        }
    }

    std::vector<KgNode> nodes;
    for (const auto& node : graph.nodes()) {
        if (node_ids.contains(node.id)) nodes.push_back(node);
    }
    std::vector<KgEdge> edges;
    std::size_t matched = 0;
    for (const auto& edge : graph.edges()) {
        if (edge_keys.contains({edge.src, edge.dst, edge.relation})) {
            edges.push_back(edge);
            ++matched;
        }
    }
    if (matched != edge_keys.size()) throw InputError("path traverses an edge absent from graph");
    return KnowledgeGraph::build(std::move(nodes), std::move(edges));
}

} // namespace kgcot
