#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cltm/common.hpp"

namespace cltm {

using Edge = std::pair<int, int>;

/// Undirected tree over observed nodes [0, L) followed by latent nodes [L, L+H).
struct LatentTree {
    std::vector<std::string> observed;
    std::vector<std::string> latent;
    std::vector<Edge> edges;  // canonical: first < second, sorted

    int observed_count() const { return static_cast<int>(observed.size()); }
    int latent_count() const { return static_cast<int>(latent.size()); }
    int node_count() const { return observed_count() + latent_count(); }
    bool is_latent(int v) const { return v >= observed_count(); }

    const std::string& name(int v) const {
        return v < observed_count() ? observed[static_cast<std::size_t>(v)]
                                    : latent[static_cast<std::size_t>(v - observed_count())];
    }

    int index_of(const std::string& n) const {
        for (int v = 0; v < node_count(); ++v)
            if (name(v) == n) return v;
        throw InvalidInput("latent tree: unknown node name '" + n + "'");
    }

    std::vector<std::vector<int>> adjacency() const {
        std::vector<std::vector<int>> adj(static_cast<std::size_t>(node_count()));
        for (const auto& [a, b] : edges) {
            adj[static_cast<std::size_t>(a)].push_back(b);
            adj[static_cast<std::size_t>(b)].push_back(a);
        }
        for (auto& row : adj) std::sort(row.begin(), row.end());
        return adj;
    }

    int edge_index(int a, int b) const {
        const Edge e{std::min(a, b), std::max(a, b)};
        const auto it = std::lower_bound(edges.begin(), edges.end(), e);
        if (it == edges.end() || *it != e) return -1;
        return static_cast<int>(it - edges.begin());
    }

    void canonicalize() {
        for (auto& e : edges)
            if (e.first > e.second) std::swap(e.first, e.second);
        std::sort(edges.begin(), edges.end());
    }

    /// Connected, acyclic, L + H - 1 edges, no self loops, latent degree >= 3.
    void validate() const {
        const int n = node_count();
        if (n < 1) throw InvalidInput("latent tree: no nodes");
        if (static_cast<int>(edges.size()) != n - 1) {
            throw InvalidInput("latent tree: edge count " + std::to_string(edges.size()) +
                               " != node count - 1 (" + std::to_string(n - 1) + ")");
        }
        std::set<std::string> seen;
        for (int v = 0; v < n; ++v) {
            if (!seen.insert(name(v)).second) throw InvalidInput("latent tree: duplicate node name " + name(v));
        }
        std::set<Edge> uniq;
        for (const auto& [a, b] : edges) {
            if (a < 0 || b < 0 || a >= n || b >= n) throw InvalidInput("latent tree: edge endpoint out of range");
            if (a == b) throw InvalidInput("latent tree: self loop at " + name(a));
            if (!uniq.insert({std::min(a, b), std::max(a, b)}).second) {
                throw InvalidInput("latent tree: duplicate edge");
            }
        }
        const auto adj = adjacency();
        std::vector<char> visited(static_cast<std::size_t>(n), 0);
        std::vector<int> stack{0};
        visited[0] = 1;
        int reached = 1;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            for (int w : adj[static_cast<std::size_t>(v)]) {
                if (!visited[static_cast<std::size_t>(w)]) {
                    visited[static_cast<std::size_t>(w)] = 1;
                    ++reached;
                    stack.push_back(w);
                }
            }
        }
        if (reached != n) throw InvalidInput("latent tree: not connected");
        for (int v = observed_count(); v < n; ++v) {
            if (adj[static_cast<std::size_t>(v)].size() < 3) {
                throw InvalidInput("latent tree: latent node " + name(v) + " has degree < 3");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Persistence: {observed: [...], latent: [...], edges: [[a, b], ...]}

inline nlohmann::json tree_to_json(const LatentTree& t) {
    nlohmann::json j;
    j["observed"] = t.observed;
    j["latent"] = t.latent;
    auto edges = nlohmann::json::array();
    for (const auto& [a, b] : t.edges) edges.push_back({t.name(a), t.name(b)});
    j["edges"] = std::move(edges);
    return j;
}

inline LatentTree tree_from_json(const nlohmann::json& j) {
    LatentTree t;
    try {
        t.observed = j.at("observed").get<std::vector<std::string>>();
        t.latent = j.at("latent").get<std::vector<std::string>>();
        std::map<std::string, int> idx;
        for (int v = 0; v < t.node_count(); ++v) idx[t.name(v)] = v;
        for (const auto& e : j.at("edges")) {
            const auto a = e.at(0).get<std::string>();
            const auto b = e.at(1).get<std::string>();
            if (!idx.count(a) || !idx.count(b)) {
                throw InvalidInput("tree json: edge references unknown node " + (idx.count(a) ? b : a));
            }
            t.edges.emplace_back(idx[a], idx[b]);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("tree json: ") + e.what());
    }
    t.canonicalize();
    t.validate();
    return t;
}

/// Graphviz export; nodes in index order, edges in canonical order.
inline std::string tree_to_dot(const LatentTree& t) {
    std::ostringstream os;
    os << "graph cltm {\n";
    for (int v = 0; v < t.node_count(); ++v) {
        os << "  \"" << t.name(v) << "\" [shape=" << (t.is_latent(v) ? "ellipse" : "box") << "];\n";
    }
    for (const auto& [a, b] : t.edges) os << "  \"" << t.name(a) << "\" -- \"" << t.name(b) << "\";\n";
    os << "}\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Bipartition similarity

namespace detail {

// Observed-node bipartitions induced by each edge, canonicalized so that the
// side holding observed node 0 is marked false. Splits with an empty observed
// side are skipped.
inline std::set<std::vector<bool>> observed_splits(const LatentTree& t) {
    const auto adj = t.adjacency();
    const int l = t.observed_count();
    std::set<std::vector<bool>> out;
    for (const auto& [a, b] : t.edges) {
        std::vector<bool> side(static_cast<std::size_t>(l), false);
        // Flood from b without crossing (a, b).
        std::vector<int> stack{b};
        std::vector<char> seen(static_cast<std::size_t>(t.node_count()), 0);
        seen[static_cast<std::size_t>(a)] = seen[static_cast<std::size_t>(b)] = 1;
        int count = 0;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            if (v < l) {
                side[static_cast<std::size_t>(v)] = true;
                ++count;
            }
            for (int w : adj[static_cast<std::size_t>(v)]) {
                if (!seen[static_cast<std::size_t>(w)]) {
                    seen[static_cast<std::size_t>(w)] = 1;
                    stack.push_back(w);
                }
            }
        }
        if (count == 0 || count == l) continue;
        if (side[0]) side.flip();
        out.insert(std::move(side));
    }
    return out;
}

}  // namespace detail

/// Robinson-Foulds style agreement in [0, 1]: the mean of the fraction of a's
/// observed bipartitions found in b and the fraction of b's found in a.
inline double tree_similarity(const LatentTree& a, const LatentTree& b) {
    if (a.observed != b.observed) {
        throw InvalidInput("tree_similarity: trees have different observed node sets");
    }
    const auto sa = detail::observed_splits(a);
    const auto sb = detail::observed_splits(b);
    if (sa.empty() && sb.empty()) return 1.0;
    if (sa.empty() || sb.empty()) return 0.0;
    std::size_t common = 0;
    for (const auto& s : sa) common += sb.count(s);
    return 0.5 * (static_cast<double>(common) / static_cast<double>(sa.size()) +
                  static_cast<double>(common) / static_cast<double>(sb.size()));
}

}  // namespace cltm
