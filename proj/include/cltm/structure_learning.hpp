#pragma once

// Latent tree recovery from an information distance matrix: a Chow-Liu
// minimum spanning tree over the observed labels, followed by recursive
// grouping of every internal node's closed neighborhood.
//
// Recursive grouping classifies pairs of active nodes with
//     Phi_ijk = d_ik - d_jk,   k ranging over the other active nodes.
//   * j is the parent of leaf i   iff  Phi_ijk == d_ij for all k
//   * i is the parent of leaf j   iff  Phi_ijk == -d_ij for all k
//   * i, j are leaf siblings      iff  Phi_ijk is constant in k and -d_ij < Phi < d_ij
// Equalities are tested to within epsilon. Sibling families without an
// active parent receive a new latent parent h with
//     d_ih = (d_ij + mean_k Phi_ijk) / 2
//     d_hk = mean_{i in C(h)} (d_ik - d_ih)   for nodes k outside h's subtree.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "cltm/common.hpp"
#include "cltm/kernel_distance.hpp"
#include "cltm/latent_tree.hpp"

namespace cltm::structure {

/// Distance table over observed nodes plus latent nodes introduced while grouping.
class ExtendedDistances {
public:
    ExtendedDistances() = default;
    explicit ExtendedDistances(const Matrix& observed) {
        const auto n = static_cast<std::size_t>(observed.rows());
        d_.assign(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                d_[i][j] = observed(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }

    int size() const { return static_cast<int>(d_.size()); }

    double operator()(int i, int j) const {
        return d_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }

    void set(int i, int j, double v) {
        d_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
        d_[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = v;
    }

    int add_node() {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        for (auto& row : d_) row.push_back(nan);
        d_.emplace_back(d_.size() + 1, nan);
        d_.back().back() = 0.0;
        return size() - 1;
    }

private:
    std::vector<std::vector<double>> d_;
};

/// Minimum spanning tree on the complete graph over observed labels. Ties are
/// broken by (min index, max index) edge order.
inline LatentTree chow_liu_tree(const kernel::DistanceMatrix& dist) {
    const auto l = static_cast<int>(dist.size());
    if (l < 2) throw InvalidInput("chow_liu_tree: need at least two labels");
    if (dist.entries.cols() != l) throw InvalidInput("chow_liu_tree: distance matrix not square");
    if (!dist.entries.allFinite()) throw InvalidInput("chow_liu_tree: non-finite distances");

    std::vector<std::tuple<double, int, int>> cand;
    cand.reserve(static_cast<std::size_t>(l * (l - 1) / 2));
    for (int i = 0; i < l; ++i)
        for (int j = i + 1; j < l; ++j) cand.emplace_back(dist.entries(i, j), i, j);
    std::sort(cand.begin(), cand.end());

    std::vector<int> parent(static_cast<std::size_t>(l));
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int v) {
        while (parent[static_cast<std::size_t>(v)] != v) {
            parent[static_cast<std::size_t>(v)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])];
            v = parent[static_cast<std::size_t>(v)];
        }
        return v;
    };

    LatentTree tree;
    for (int i = 0; i < l; ++i) {
        tree.observed.push_back(dist.names.empty() ? "y" + std::to_string(i)
                                                   : dist.names[static_cast<std::size_t>(i)]);
    }
    for (const auto& [w, i, j] : cand) {
        const int ri = find(i), rj = find(j);
        if (ri == rj) continue;
        parent[static_cast<std::size_t>(ri)] = rj;
        tree.edges.emplace_back(i, j);
        if (static_cast<int>(tree.edges.size()) == l - 1) break;
    }
    tree.canonicalize();
    return tree;
}

/// Phi_ijk = d_ik - d_jk.
inline double sibling_statistic(const ExtendedDistances& d, int i, int j, int k) {
    if (i == j || j == k || i == k) throw InvalidInput("sibling_statistic: indices must be distinct");
    const int n = d.size();
    if (i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n) {
        throw InvalidInput("sibling_statistic: index out of range");
    }
    return d(i, k) - d(j, k);
}

struct GroupingResult {
    std::vector<Edge> edges;      // over ExtendedDistances indices
    std::vector<int> new_latent;  // appended to the table, in creation order
};

namespace detail {

enum class Relation { None, Sibling, FirstIsParent, SecondIsParent };

struct PairTest {
    Relation kind = Relation::None;
    double score = std::numeric_limits<double>::infinity();
};

// Smallest-score relation that passes for the pair (i, j) given witnesses.
inline PairTest classify_pair(const ExtendedDistances& d, int i, int j,
                              const std::vector<int>& active, double eps) {
    const double dij = d(i, j);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double dev_plus = 0.0;   // max |Phi - d_ij|: j is parent of i
    double dev_minus = 0.0;  // max |Phi + d_ij|: i is parent of j
    for (int k : active) {
        if (k == i || k == j) continue;
        const double phi = d(i, k) - d(j, k);
        lo = std::min(lo, phi);
        hi = std::max(hi, phi);
        dev_plus = std::max(dev_plus, std::abs(phi - dij));
        dev_minus = std::max(dev_minus, std::abs(phi + dij));
    }
    PairTest best;
    auto offer = [&](Relation r, double s) {
        if (s < best.score) best = {r, s};
    };
    if (dev_plus <= eps) offer(Relation::SecondIsParent, dev_plus);
    if (dev_minus <= eps) offer(Relation::FirstIsParent, dev_minus);
    const double spread = hi - lo;
    if (spread <= eps && lo > -dij + eps && hi < dij - eps) offer(Relation::Sibling, spread);
    return best;
}

inline double sibling_spread(const ExtendedDistances& d, int i, int j, const std::vector<int>& active) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int k : active) {
        if (k == i || k == j) continue;
        const double phi = d(i, k) - d(j, k);
        lo = std::min(lo, phi);
        hi = std::max(hi, phi);
    }
    return hi - lo;
}

constexpr double kMinDistance = 1e-9;

}  // namespace detail

/// One run of recursive grouping over `nodes`. New latent nodes are appended
/// to `dist` together with their distances to every node already in the table.
/// For nodes outside `nodes`, `attachment` names the member of `nodes` through
/// which they connect; it decides which child subtree they sit in.
inline GroupingResult recursive_grouping(ExtendedDistances& dist, const std::vector<int>& nodes,
                                         double epsilon,
                                         const std::map<int, int>& attachment = {}) {
    using detail::Relation;
    if (nodes.size() < 2) throw InvalidInput("recursive_grouping: need at least two nodes");
    for (int v : nodes) {
        if (v < 0 || v >= dist.size()) throw InvalidInput("recursive_grouping: node index out of range");
        for (int w : nodes) {
            if (!std::isfinite(dist(v, w))) throw InvalidInput("recursive_grouping: non-finite distance");
        }
    }

    GroupingResult out;
    std::vector<int> active = nodes;
    std::sort(active.begin(), active.end());
    // top[v]: current active ancestor of every node handled by this call.
    std::map<int, int> top;
    for (int v : active) top[v] = v;

    auto branch_root = [&](int k) -> int {
        if (auto it = top.find(k); it != top.end()) return it->second;
        if (auto it = attachment.find(k); it != attachment.end()) return top.at(it->second);
        return -1;
    };

    while (active.size() > 2) {
        const auto m = active.size();
        // Pairwise relations.
        std::vector<std::vector<detail::PairTest>> rel(m, std::vector<detail::PairTest>(m));
        std::vector<std::tuple<double, std::size_t, std::size_t>> order;
        for (std::size_t a = 0; a < m; ++a) {
            for (std::size_t b = a + 1; b < m; ++b) {
                const auto t = detail::classify_pair(dist, active[a], active[b], active, epsilon);
                rel[a][b] = t;
                detail::PairTest flipped = t;
                if (t.kind == Relation::FirstIsParent) flipped.kind = Relation::SecondIsParent;
                else if (t.kind == Relation::SecondIsParent) flipped.kind = Relation::FirstIsParent;
                rel[b][a] = flipped;
                if (t.kind != Relation::None) order.emplace_back(t.score, a, b);
            }
        }
        std::sort(order.begin(), order.end());

        // Greedy family merging in increasing score order; a merge is kept only
        // when every pair in the merged family is related and at most one
        // member acts as parent of all others.
        std::vector<std::vector<std::size_t>> family(m);
        std::vector<std::size_t> fam_of(m);
        for (std::size_t a = 0; a < m; ++a) {
            family[a] = {a};
            fam_of[a] = a;
        }
        auto consistent = [&](const std::vector<std::size_t>& g) {
            std::set<std::size_t> parents;
            for (std::size_t x = 0; x < g.size(); ++x) {
                for (std::size_t y = x + 1; y < g.size(); ++y) {
                    const auto& r = rel[g[x]][g[y]];
                    if (r.kind == Relation::None) return false;
                    if (r.kind == Relation::FirstIsParent) parents.insert(g[x]);
                    if (r.kind == Relation::SecondIsParent) parents.insert(g[y]);
                }
            }
            if (parents.size() > 1) return false;
            if (parents.size() == 1) {
                const auto p = *parents.begin();
                for (auto v : g) {
                    if (v != p && rel[p][v].kind != Relation::FirstIsParent) return false;
                }
            }
            return true;
        };
        for (const auto& [score, a, b] : order) {
            const auto fa = fam_of[a], fb = fam_of[b];
            if (fa == fb) continue;
            std::vector<std::size_t> merged = family[fa];
            merged.insert(merged.end(), family[fb].begin(), family[fb].end());
            std::sort(merged.begin(), merged.end());
            if (!consistent(merged)) continue;
            const auto keep = std::min(fa, fb), drop = std::max(fa, fb);
            family[keep] = merged;
            family[drop].clear();
            for (auto v : merged) fam_of[v] = keep;
        }

        bool progressed = false;
        for (const auto& f : family) progressed = progressed || f.size() >= 2;
        if (!progressed) {
            // Noise fallback: pair with the flattest Phi profile become siblings.
            double best = std::numeric_limits<double>::infinity();
            std::size_t ba = 0, bb = 1;
            for (std::size_t a = 0; a < m; ++a) {
                for (std::size_t b = a + 1; b < m; ++b) {
                    const double s = detail::sibling_spread(dist, active[a], active[b], active);
                    if (s < best) {
                        best = s;
                        ba = a;
                        bb = b;
                    }
                }
            }
            rel[ba][bb].kind = rel[bb][ba].kind = Relation::Sibling;
            family[ba] = {ba, bb};
            family[bb].clear();
        }

        std::vector<int> next;
        for (const auto& f : family) {
            if (f.empty()) continue;
            if (f.size() == 1) {
                next.push_back(active[f[0]]);
                continue;
            }
            // Parent present?
            int parent = -1;
            for (auto x : f) {
                bool all = true;
                for (auto y : f)
                    if (y != x && rel[x][y].kind != Relation::FirstIsParent) all = false;
                if (all) {
                    parent = static_cast<int>(x);
                    break;
                }
            }
            if (parent >= 0) {
                const int p = active[static_cast<std::size_t>(parent)];
                for (auto y : f) {
                    const int c = active[y];
                    if (c == p) continue;
                    out.edges.emplace_back(p, c);
                    for (auto& [node, root] : top)
                        if (root == c) root = p;
                }
                next.push_back(p);
                continue;
            }

            // New latent parent for a sibling family.
            std::vector<int> children;
            for (auto y : f) children.push_back(active[y]);
            std::vector<double> to_child(children.size());
            for (std::size_t x = 0; x < children.size(); ++x) {
                const int i = children[x];
                double acc = 0.0;
                for (std::size_t y = 0; y < children.size(); ++y) {
                    if (y == x) continue;
                    const int j = children[y];
                    double phi = 0.0;
                    int witnesses = 0;
                    for (int k : active) {
                        if (k == i || k == j) continue;
                        phi += dist(i, k) - dist(j, k);
                        ++witnesses;
                    }
                    const double mean_phi = witnesses > 0 ? phi / witnesses : 0.0;
                    acc += 0.5 * (dist(i, j) + mean_phi);
                }
                to_child[x] = std::max(detail::kMinDistance, acc / static_cast<double>(children.size() - 1));
            }

            const int h = dist.add_node();
            out.new_latent.push_back(h);
            for (std::size_t x = 0; x < children.size(); ++x) dist.set(children[x], h, to_child[x]);
            for (int k = 0; k < h; ++k) {
                if (std::find(children.begin(), children.end(), k) != children.end()) continue;
                const int excluded = branch_root(k);
                double acc = 0.0;
                int used = 0;
                for (std::size_t x = 0; x < children.size(); ++x) {
                    if (children[x] == excluded) continue;
                    acc += dist(children[x], k) - to_child[x];
                    ++used;
                }
                if (used == 0) continue;  // unreachable: families have >= 2 children
                dist.set(h, k, std::max(detail::kMinDistance, acc / used));
            }
            for (int c : children) out.edges.emplace_back(h, c);
            top[h] = h;
            for (auto& [node, root] : top) {
                if (std::find(children.begin(), children.end(), root) != children.end()) root = h;
            }
            next.push_back(h);
        }
        std::sort(next.begin(), next.end());
        active = std::move(next);
    }
    if (active.size() == 2) out.edges.emplace_back(active[0], active[1]);
    return out;
}

struct ClrgOptions {
    double epsilon = 0.05;
    bool relative = true;  // epsilon scaled by the median off-diagonal distance
};

inline double median_offdiagonal(const Matrix& d) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < d.rows(); ++i)
        for (Eigen::Index j = i + 1; j < d.cols(); ++j) v.push_back(d(i, j));
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto m = v.size();
    return m % 2 == 1 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
}

namespace detail {

// Removes latent leaves and splices out degree-2 latent nodes, then renames
// the surviving latent nodes h1..hH in creation order.
inline LatentTree contract_latent(int observed, int total, const std::vector<std::set<int>>& adj_in,
                                  const std::vector<std::string>& observed_names) {
    auto adj = adj_in;
    std::vector<char> alive(static_cast<std::size_t>(total), 1);
    bool changed = true;
    while (changed) {
        changed = false;
        for (int v = observed; v < total; ++v) {
            auto& nb = adj[static_cast<std::size_t>(v)];
            if (!alive[static_cast<std::size_t>(v)] || nb.size() >= 3) continue;
            if (nb.size() == 2) {
                const int a = *nb.begin(), b = *nb.rbegin();
                adj[static_cast<std::size_t>(a)].erase(v);
                adj[static_cast<std::size_t>(b)].erase(v);
                adj[static_cast<std::size_t>(a)].insert(b);
                adj[static_cast<std::size_t>(b)].insert(a);
            } else {
                for (int w : nb) adj[static_cast<std::size_t>(w)].erase(v);
            }
            nb.clear();
            alive[static_cast<std::size_t>(v)] = 0;
            changed = true;
        }
    }
    std::vector<int> remap(static_cast<std::size_t>(total), -1);
    LatentTree t;
    t.observed = observed_names;
    for (int v = 0; v < observed; ++v) remap[static_cast<std::size_t>(v)] = v;
    int next = observed;
    for (int v = observed; v < total; ++v) {
        if (!alive[static_cast<std::size_t>(v)]) continue;
        remap[static_cast<std::size_t>(v)] = next++;
        t.latent.push_back("h" + std::to_string(t.latent.size() + 1));
    }
    for (int v = 0; v < total; ++v) {
        for (int w : adj[static_cast<std::size_t>(v)]) {
            if (v < w) t.edges.emplace_back(remap[static_cast<std::size_t>(v)], remap[static_cast<std::size_t>(w)]);
        }
    }
    t.canonicalize();
    return t;
}

}  // namespace detail

/// Chow-Liu tree followed by recursive grouping over each internal node's
/// closed neighborhood, visited in decreasing MST degree (ties by index).
/// `epsilon` is absolute here.
inline LatentTree clrg(const kernel::DistanceMatrix& dist, double epsilon) {
    dist.validate();
    const LatentTree mst = chow_liu_tree(dist);
    const int l = mst.observed_count();
    if (l < 3) return mst;

    ExtendedDistances ext(dist.entries);
    std::vector<std::set<int>> adj(static_cast<std::size_t>(l));
    for (const auto& [a, b] : mst.edges) {
        adj[static_cast<std::size_t>(a)].insert(b);
        adj[static_cast<std::size_t>(b)].insert(a);
    }
    std::vector<int> internal;
    for (int v = 0; v < l; ++v)
        if (adj[static_cast<std::size_t>(v)].size() >= 2) internal.push_back(v);
    std::stable_sort(internal.begin(), internal.end(), [&](int a, int b) {
        return adj[static_cast<std::size_t>(a)].size() > adj[static_cast<std::size_t>(b)].size();
    });

    for (int center : internal) {
        std::vector<int> hood(adj[static_cast<std::size_t>(center)].begin(),
                              adj[static_cast<std::size_t>(center)].end());
        hood.push_back(center);
        std::sort(hood.begin(), hood.end());

        // Every node outside the neighborhood hangs off exactly one neighbor.
        std::map<int, int> attachment;
        for (int m : hood) {
            if (m == center) continue;
            std::vector<int> stack;
            for (int w : adj[static_cast<std::size_t>(m)])
                if (w != center) stack.push_back(w);
            std::set<int> seen{m, center};
            while (!stack.empty()) {
                const int v = stack.back();
                stack.pop_back();
                if (!seen.insert(v).second) continue;
                attachment[v] = m;
                for (int w : adj[static_cast<std::size_t>(v)])
                    if (!seen.count(w)) stack.push_back(w);
            }
        }

        const auto local = recursive_grouping(ext, hood, epsilon, attachment);

        for (int m : hood) {
            if (m == center) continue;
            adj[static_cast<std::size_t>(m)].erase(center);
        }
        adj[static_cast<std::size_t>(center)].clear();
        adj.resize(static_cast<std::size_t>(ext.size()));
        for (const auto& [a, b] : local.edges) {
            adj[static_cast<std::size_t>(a)].insert(b);
            adj[static_cast<std::size_t>(b)].insert(a);
        }
    }

    LatentTree out = detail::contract_latent(l, ext.size(), adj, mst.observed);
    out.validate();
    return out;
}

inline LatentTree clrg(const kernel::DistanceMatrix& dist, const ClrgOptions& opt = {}) {
    const double eps = opt.relative ? opt.epsilon * median_offdiagonal(dist.entries) : opt.epsilon;
    return clrg(dist, eps);
}

}  // namespace cltm::structure
