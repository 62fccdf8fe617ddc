#pragma once

// Exact inference for the binary tree CRF
//
//     P(z | x) = exp(-E(x, z) - A(x)),   E = sum_k phi_k z_k + sum_(k,t) phi_kt z_k z_t,
//
// with z in {0,1}^N. Sum-product and max-product messages are kept in log
// space with max-shifted log-sum-exp, so potentials of several hundred in
// magnitude stay finite.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cltm/common.hpp"
#include "cltm/latent_tree.hpp"

namespace cltm::crf {

/// node: one potential per tree node; edge: one per tree edge, in the tree's
/// canonical edge order.
struct Potentials {
    Vector node;
    Vector edge;
};

constexpr int kUnset = -1;

/// Value per node in {0, 1}, or kUnset.
using Assignment = std::vector<int>;

struct InferenceResult {
    Vector node_marginals;                      // P(z_k = 1)
    std::vector<Eigen::Matrix2d> edge_marginals;  // table(z_a, z_b) for edge (a, b), a < b
    double log_partition = 0.0;
    Assignment map;
};

/// Rooted traversal of a tree, computed once and reused across samples.
class TreeTopology {
public:
    TreeTopology() = default;
    explicit TreeTopology(const LatentTree& tree, int root = 0) : edges_(tree.edges) {
        const int n = tree.node_count();
        if (n < 1) throw InvalidInput("tree_crf: empty tree");
        if (root < 0 || root >= n) throw InvalidInput("tree_crf: root out of range");
        if (static_cast<int>(tree.edges.size()) != n - 1) throw InvalidInput("tree_crf: not a tree");
        parent_.assign(static_cast<std::size_t>(n), -1);
        parent_edge_.assign(static_cast<std::size_t>(n), -1);
        children_.assign(static_cast<std::size_t>(n), {});
        std::vector<std::vector<std::pair<int, int>>> adj(static_cast<std::size_t>(n));
        for (std::size_t e = 0; e < tree.edges.size(); ++e) {
            const auto [a, b] = tree.edges[e];
            adj[static_cast<std::size_t>(a)].emplace_back(b, static_cast<int>(e));
            adj[static_cast<std::size_t>(b)].emplace_back(a, static_cast<int>(e));
        }
        std::vector<char> seen(static_cast<std::size_t>(n), 0);
        order_.reserve(static_cast<std::size_t>(n));
        order_.push_back(root);
        seen[static_cast<std::size_t>(root)] = 1;
        for (std::size_t q = 0; q < order_.size(); ++q) {
            const int v = order_[q];
            for (const auto& [w, e] : adj[static_cast<std::size_t>(v)]) {
                if (seen[static_cast<std::size_t>(w)]) continue;
                seen[static_cast<std::size_t>(w)] = 1;
                parent_[static_cast<std::size_t>(w)] = v;
                parent_edge_[static_cast<std::size_t>(w)] = e;
                children_[static_cast<std::size_t>(v)].push_back(w);
                order_.push_back(w);
            }
        }
        if (static_cast<int>(order_.size()) != n) throw InvalidInput("tree_crf: tree is not connected");
    }

    const std::vector<Edge>& edges() const { return edges_; }
    int size() const { return static_cast<int>(order_.size()); }
    int root() const { return order_.front(); }
    const std::vector<int>& order() const { return order_; }  // parents before children
    int parent(int v) const { return parent_[static_cast<std::size_t>(v)]; }
    int parent_edge(int v) const { return parent_edge_[static_cast<std::size_t>(v)]; }
    const std::vector<int>& children(int v) const { return children_[static_cast<std::size_t>(v)]; }

private:
    std::vector<Edge> edges_;
    std::vector<int> order_;
    std::vector<int> parent_;
    std::vector<int> parent_edge_;
    std::vector<std::vector<int>> children_;
};

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using Log2 = std::array<double, 2>;

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline void check_inputs(const TreeTopology& topo, const Potentials& pot, const Assignment& clamp) {
    const auto n = static_cast<Eigen::Index>(topo.size());
    if (pot.node.size() != n) throw InvalidInput("tree_crf: node potential count does not match tree");
    if (pot.edge.size() != static_cast<Eigen::Index>(topo.edges().size())) {
        throw InvalidInput("tree_crf: edge potential count does not match tree");
    }
    if (!clamp.empty()) {
        if (static_cast<Eigen::Index>(clamp.size()) != n) throw InvalidInput("tree_crf: clamp size does not match tree");
        for (int v : clamp)
            if (v != kUnset && v != 0 && v != 1) throw InvalidInput("tree_crf: clamp values must be 0, 1 or unset");
    }
}

inline bool allowed(const Assignment& clamp, int v, int z) {
    return clamp.empty() || clamp[static_cast<std::size_t>(v)] == kUnset ||
           clamp[static_cast<std::size_t>(v)] == z;
}

struct SumProduct {
    std::vector<Log2> local;  // -phi_v z + sum of child up-messages (over allowed z)
    std::vector<Log2> up;     // message v -> parent, indexed by parent state
    std::vector<Log2> down;   // message parent -> v, indexed by v state
    double log_z = 0.0;
};

inline SumProduct upward(const TreeTopology& topo, const Potentials& pot, const Assignment& clamp) {
    const auto n = static_cast<std::size_t>(topo.size());
    SumProduct sp;
    sp.local.assign(n, {0.0, 0.0});
    sp.up.assign(n, {0.0, 0.0});
    const auto& order = topo.order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int v = *it;
        auto& loc = sp.local[static_cast<std::size_t>(v)];
        for (int z = 0; z < 2; ++z) {
            if (!allowed(clamp, v, z)) {
                loc[static_cast<std::size_t>(z)] = kNegInf;
                continue;
            }
            double s = -pot.node(v) * z;
            for (int c : topo.children(v)) s += sp.up[static_cast<std::size_t>(c)][static_cast<std::size_t>(z)];
            loc[static_cast<std::size_t>(z)] = s;
        }
        const int p = topo.parent(v);
        if (p < 0) continue;
        const double w = pot.edge(topo.parent_edge(v));
        for (int zp = 0; zp < 2; ++zp) {
            sp.up[static_cast<std::size_t>(v)][static_cast<std::size_t>(zp)] =
                log_add(loc[0], loc[1] == kNegInf ? kNegInf : loc[1] - w * zp);
        }
    }
    const auto& r = sp.local[static_cast<std::size_t>(topo.root())];
    sp.log_z = log_add(r[0], r[1]);
    return sp;
}

inline void downward(const TreeTopology& topo, const Potentials& pot, SumProduct& sp) {
    const auto n = static_cast<std::size_t>(topo.size());
    sp.down.assign(n, {0.0, 0.0});
    for (int v : topo.order()) {
        const int p = topo.parent(v);
        if (p < 0) continue;
        const double w = pot.edge(topo.parent_edge(v));
        Log2 cavity;  // parent belief excluding v's message
        for (int zp = 0; zp < 2; ++zp) {
            const double lp = sp.local[static_cast<std::size_t>(p)][static_cast<std::size_t>(zp)];
            cavity[static_cast<std::size_t>(zp)] =
                lp == kNegInf ? kNegInf
                              : lp - sp.up[static_cast<std::size_t>(v)][static_cast<std::size_t>(zp)] +
                                    sp.down[static_cast<std::size_t>(p)][static_cast<std::size_t>(zp)];
        }
        for (int zv = 0; zv < 2; ++zv) {
            sp.down[static_cast<std::size_t>(v)][static_cast<std::size_t>(zv)] =
                log_add(cavity[0], cavity[1] == kNegInf ? kNegInf : cavity[1] - w * zv);
        }
    }
}

inline double prob_one(const Log2& b) {
    if (b[1] == kNegInf) return 0.0;
    if (b[0] == kNegInf) return 1.0;
    // 1 / (1 + exp(b0 - b1)), evaluated on the side that cannot overflow.
    const double d = b[0] - b[1];
    if (d >= 0) {
        const double e = std::exp(-d);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(d));
}

}  // namespace detail

/// sum_k phi_k z_k + sum_(k,t) phi_kt z_k z_t over a full assignment.
inline double energy(const LatentTree& tree, const Potentials& pot, const Assignment& z) {
    const auto n = static_cast<std::size_t>(tree.node_count());
    if (z.size() != n) throw InvalidInput("energy: assignment size does not match tree");
    if (pot.node.size() != static_cast<Eigen::Index>(n) ||
        pot.edge.size() != static_cast<Eigen::Index>(tree.edges.size())) {
        throw InvalidInput("energy: potential sizes do not match tree");
    }
    double e = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        if (z[k] != 0 && z[k] != 1) throw InvalidInput("energy: assignment must be fully set to 0/1");
        e += pot.node(static_cast<Eigen::Index>(k)) * z[k];
    }
    for (std::size_t i = 0; i < tree.edges.size(); ++i) {
        const auto [a, b] = tree.edges[i];
        e += pot.edge(static_cast<Eigen::Index>(i)) * z[static_cast<std::size_t>(a)] * z[static_cast<std::size_t>(b)];
    }
    return e;
}

/// log sum over clamp-consistent z of exp(-energy(z)).
inline double log_partition(const TreeTopology& topo, const Potentials& pot, const Assignment& clamp = {}) {
    detail::check_inputs(topo, pot, clamp);
    return detail::upward(topo, pot, clamp).log_z;
}

inline double log_partition(const LatentTree& tree, const Potentials& pot, const Assignment& clamp = {}) {
    return log_partition(TreeTopology(tree), pot, clamp);
}

/// Node and edge marginals plus log-partition. Clamped nodes report their value exactly.
inline InferenceResult marginals(const TreeTopology& topo, const Potentials& pot, const Assignment& clamp = {}) {
    detail::check_inputs(topo, pot, clamp);
    auto sp = detail::upward(topo, pot, clamp);
    detail::downward(topo, pot, sp);

    const int n = topo.size();
    InferenceResult res;
    res.log_partition = sp.log_z;
    res.node_marginals.resize(n);
    for (int v = 0; v < n; ++v) {
        const auto& loc = sp.local[static_cast<std::size_t>(v)];
        const auto& dn = sp.down[static_cast<std::size_t>(v)];
        detail::Log2 b{loc[0] == detail::kNegInf ? detail::kNegInf : loc[0] + dn[0],
                       loc[1] == detail::kNegInf ? detail::kNegInf : loc[1] + dn[1]};
        res.node_marginals(v) = detail::prob_one(b);
    }

    const auto& edges = topo.edges();
    res.edge_marginals.assign(edges.size(), Eigen::Matrix2d::Zero());
    for (int v = 0; v < n; ++v) {
        const int p = topo.parent(v);
        if (p < 0) continue;
        const int e = topo.parent_edge(v);
        const double w = pot.edge(e);
        double tab[2][2];
        double mx = detail::kNegInf;
        for (int zp = 0; zp < 2; ++zp) {
            const double lp = sp.local[static_cast<std::size_t>(p)][static_cast<std::size_t>(zp)];
            const double cav = lp == detail::kNegInf
                                   ? detail::kNegInf
                                   : lp - sp.up[static_cast<std::size_t>(v)][static_cast<std::size_t>(zp)] +
                                         sp.down[static_cast<std::size_t>(p)][static_cast<std::size_t>(zp)];
            for (int zv = 0; zv < 2; ++zv) {
                const double lv = sp.local[static_cast<std::size_t>(v)][static_cast<std::size_t>(zv)];
                const double s = (cav == detail::kNegInf || lv == detail::kNegInf) ? detail::kNegInf
                                                                                   : cav + lv - w * zp * zv;
                tab[zp][zv] = s;
                mx = std::max(mx, s);
            }
        }
        Eigen::Matrix2d t;
        for (int zp = 0; zp < 2; ++zp)
            for (int zv = 0; zv < 2; ++zv)
                t(zp, zv) = tab[zp][zv] == detail::kNegInf ? 0.0 : std::exp(tab[zp][zv] - mx);
        t /= t.sum();
        // Stored as table(z_a, z_b) for the canonical edge (a, b).
        res.edge_marginals[static_cast<std::size_t>(e)] = edges[static_cast<std::size_t>(e)].first == p ? t : Eigen::Matrix2d(t.transpose());
    }
    return res;
}

inline InferenceResult marginals(const LatentTree& tree, const Potentials& pot, const Assignment& clamp = {}) {
    return marginals(TreeTopology(tree), pot, clamp);
}

/// Energy minimizer consistent with the clamp via max-product messages and
/// backtracking. Ties resolve toward 0, root first.
inline Assignment map_config(const TreeTopology& topo, const Potentials& pot, const Assignment& clamp = {}) {
    detail::check_inputs(topo, pot, clamp);
    const auto n = static_cast<std::size_t>(topo.size());
    std::vector<detail::Log2> local(n), up(n);
    std::vector<std::array<int, 2>> choice(n, {0, 0});  // best z_v given parent state
    const auto& order = topo.order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int v = *it;
        auto& loc = local[static_cast<std::size_t>(v)];
        for (int z = 0; z < 2; ++z) {
            if (!detail::allowed(clamp, v, z)) {
                loc[static_cast<std::size_t>(z)] = detail::kNegInf;
                continue;
            }
            double s = -pot.node(v) * z;
            for (int c : topo.children(v)) s += up[static_cast<std::size_t>(c)][static_cast<std::size_t>(z)];
            loc[static_cast<std::size_t>(z)] = s;
        }
        if (topo.parent(v) < 0) continue;
        const double w = pot.edge(topo.parent_edge(v));
        for (int zp = 0; zp < 2; ++zp) {
            const double s0 = loc[0];
            const double s1 = loc[1] == detail::kNegInf ? detail::kNegInf : loc[1] - w * zp;
            const int best = s1 > s0 ? 1 : 0;
            choice[static_cast<std::size_t>(v)][static_cast<std::size_t>(zp)] = best;
            up[static_cast<std::size_t>(v)][static_cast<std::size_t>(zp)] = best ? s1 : s0;
        }
    }
    Assignment z(n, 0);
    const auto& r = local[static_cast<std::size_t>(topo.root())];
    z[static_cast<std::size_t>(topo.root())] = r[1] > r[0] ? 1 : 0;
    for (int v : order) {
        const int p = topo.parent(v);
        if (p < 0) continue;
        z[static_cast<std::size_t>(v)] = choice[static_cast<std::size_t>(v)][static_cast<std::size_t>(z[static_cast<std::size_t>(p)])];
    }
    return z;
}

inline Assignment map_config(const LatentTree& tree, const Potentials& pot, const Assignment& clamp = {}) {
    return map_config(TreeTopology(tree), pot, clamp);
}

/// Sample indices ordered by descending -phi_h for the named latent node
/// (stable in sample index), truncated to top_k (0 = all).
inline std::vector<int> latent_activation_scores(const LatentTree& tree, const Matrix& node_potentials,
                                                 const std::string& latent_name, std::size_t top_k = 0) {
    int h = -1;
    for (int v = tree.observed_count(); v < tree.node_count(); ++v)
        if (tree.name(v) == latent_name) h = v;
    if (h < 0) throw InvalidInput("latent_activation_scores: unknown latent node '" + latent_name + "'");
    if (node_potentials.cols() != tree.node_count()) {
        throw InvalidInput("latent_activation_scores: potential width does not match tree");
    }
    std::vector<int> idx(static_cast<std::size_t>(node_potentials.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return -node_potentials(a, h) > -node_potentials(b, h);
    });
    if (top_k > 0 && top_k < idx.size()) idx.resize(top_k);
    return idx;
}

}  // namespace cltm::crf
