#pragma once

// Ground-truth conditional latent tree models and brute-force oracles.
//
// Features are drawn from well-separated Gaussian clusters and each cluster
// carries its own node potentials, so the conditional label distribution is
// piecewise constant in x. Enumeration oracles are exact for up to 20 nodes.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cltm/common.hpp"
#include "cltm/dataset.hpp"
#include "cltm/kernel_distance.hpp"
#include "cltm/latent_tree.hpp"
#include "cltm/tree_crf.hpp"

namespace cltm::synthetic {

constexpr int kMaxEnumerationNodes = 20;

struct GroundTruthModel {
    LatentTree tree;
    std::vector<crf::Potentials> cluster_potentials;  // one full set per cluster
    Matrix centers;                                   // clusters x d
    double noise_scale = 0.1;

    int clusters() const { return static_cast<int>(cluster_potentials.size()); }

    void validate() const {
        tree.validate();
        if (cluster_potentials.empty()) throw InvalidInput("ground truth: no clusters");
        if (centers.rows() != clusters()) throw InvalidInput("ground truth: one center per cluster required");
        for (const auto& p : cluster_potentials) {
            if (p.node.size() != tree.node_count() ||
                p.edge.size() != static_cast<Eigen::Index>(tree.edges.size())) {
                throw InvalidInput("ground truth: potential sizes do not match tree");
            }
            if (!p.node.allFinite() || !p.edge.allFinite()) throw InvalidInput("ground truth: non-finite potentials");
        }
        for (Eigen::Index a = 0; a < centers.rows(); ++a) {
            for (Eigen::Index b = a + 1; b < centers.rows(); ++b) {
                if ((centers.row(a) - centers.row(b)).norm() < 6.0 * noise_scale) {
                    throw InvalidInput("ground truth: cluster centers closer than 6x noise scale");
                }
            }
        }
    }
};

struct SyntheticDataset {
    LabeledDataset data;     // observed labels; scenes = cluster ids
    LabelMatrix hidden;      // n x H latent values
    std::vector<int> cluster;
};

// ---------------------------------------------------------------------------
// Enumeration oracle

/// Exhaustive enumeration in lexicographic order (node 0 most significant).
inline crf::InferenceResult brute_force_inference(const LatentTree& tree, const crf::Potentials& pot,
                                                  const crf::Assignment& clamp = {}) {
    const int n = tree.node_count();
    if (n > kMaxEnumerationNodes) {
        throw InvalidInput("brute_force_inference: " + std::to_string(n) + " nodes exceeds the enumeration guard");
    }
    if (!clamp.empty() && static_cast<int>(clamp.size()) != n) {
        throw InvalidInput("brute_force_inference: clamp size does not match tree");
    }
    const std::size_t configs = std::size_t{1} << n;
    std::vector<double> logw;
    std::vector<std::size_t> index;
    logw.reserve(configs);
    crf::Assignment z(static_cast<std::size_t>(n));
    crf::InferenceResult res;
    double best_energy = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < configs; ++c) {
        bool ok = true;
        for (int k = 0; k < n; ++k) {
            z[static_cast<std::size_t>(k)] = static_cast<int>((c >> (n - 1 - k)) & 1U);
            if (!clamp.empty() && clamp[static_cast<std::size_t>(k)] != crf::kUnset &&
                clamp[static_cast<std::size_t>(k)] != z[static_cast<std::size_t>(k)]) {
                ok = false;
            }
        }
        if (!ok) continue;
        const double e = crf::energy(tree, pot, z);
        if (e < best_energy) {
            best_energy = e;
            res.map = z;
        }
        logw.push_back(-e);
        index.push_back(c);
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (double v : logw) total += std::exp(v - mx);
    res.log_partition = mx + std::log(total);

    res.node_marginals = Vector::Zero(n);
    res.edge_marginals.assign(tree.edges.size(), Eigen::Matrix2d::Zero());
    for (std::size_t r = 0; r < logw.size(); ++r) {
        const double p = std::exp(logw[r] - res.log_partition);
        const std::size_t c = index[r];
        auto bit = [&](int k) { return static_cast<int>((c >> (n - 1 - k)) & 1U); };
        for (int k = 0; k < n; ++k)
            if (bit(k)) res.node_marginals(k) += p;
        for (std::size_t e = 0; e < tree.edges.size(); ++e) {
            res.edge_marginals[e](bit(tree.edges[e].first), bit(tree.edges[e].second)) += p;
        }
    }
    return res;
}

/// Probability of every configuration (lexicographic index), for joint queries.
inline std::vector<double> enumerate_distribution(const LatentTree& tree, const crf::Potentials& pot) {
    const int n = tree.node_count();
    if (n > kMaxEnumerationNodes) throw InvalidInput("enumeration: node count exceeds the guard");
    const std::size_t configs = std::size_t{1} << n;
    std::vector<double> p(configs);
    crf::Assignment z(static_cast<std::size_t>(n));
    for (std::size_t c = 0; c < configs; ++c) {
        for (int k = 0; k < n; ++k) z[static_cast<std::size_t>(k)] = static_cast<int>((c >> (n - 1 - k)) & 1U);
        p[c] = -crf::energy(tree, pot, z);
    }
    const double mx = *std::max_element(p.begin(), p.end());
    double total = 0.0;
    for (auto& v : p) {
        v = std::exp(v - mx);
        total += v;
    }
    for (auto& v : p) v /= total;
    return p;
}

inline Eigen::Matrix2d joint_from_distribution(const std::vector<double>& p, int n, int k, int t) {
    Eigen::Matrix2d tab = Eigen::Matrix2d::Zero();
    for (std::size_t c = 0; c < p.size(); ++c) {
        tab(static_cast<int>((c >> (n - 1 - k)) & 1U), static_cast<int>((c >> (n - 1 - t)) & 1U)) += p[c];
    }
    return tab;
}

/// Exact joint table of (z_k, z_t) under one cluster's potentials.
inline Eigen::Matrix2d exact_pairwise_joint(const GroundTruthModel& model, int cluster, int k, int t) {
    if (cluster < 0 || cluster >= model.clusters()) throw InvalidInput("exact_pairwise_joint: bad cluster");
    const int n = model.tree.node_count();
    if (k < 0 || t < 0 || k >= n || t >= n) throw InvalidInput("exact_pairwise_joint: node index out of range");
    const auto p = enumerate_distribution(model.tree, model.cluster_potentials[static_cast<std::size_t>(cluster)]);
    return joint_from_distribution(p, n, k, t);
}

/// Information distances between exact joints. Observed nodes only unless
/// include_latent is set.
inline kernel::DistanceMatrix exact_distance_matrix(const GroundTruthModel& model, int cluster,
                                                    bool include_latent = false,
                                                    const kernel::DistanceParams& params = {}) {
    if (cluster < 0 || cluster >= model.clusters()) throw InvalidInput("exact_distance_matrix: bad cluster");
    const int n = model.tree.node_count();
    const int m = include_latent ? n : model.tree.observed_count();
    const auto p = enumerate_distribution(model.tree, model.cluster_potentials[static_cast<std::size_t>(cluster)]);
    kernel::DistanceMatrix dm;
    dm.entries = Matrix::Zero(m, m);
    dm.clamp_ceiling = params.clamp_ceiling;
    for (int v = 0; v < m; ++v) dm.names.push_back(model.tree.name(v));
    for (int k = 0; k < m; ++k) {
        for (int t = k + 1; t < m; ++t) {
            const double d = kernel::pairwise_distance({joint_from_distribution(p, n, k, t)},
                                                       {joint_from_distribution(p, n, k, k)},
                                                       {joint_from_distribution(p, n, t, t)}, params);
            dm.entries(k, t) = d;
            dm.entries(t, k) = d;
        }
    }
    return dm;
}

// ---------------------------------------------------------------------------
// Sampling

/// Sequential clamped-marginal sampling: draw node 0 from its marginal, clamp
/// it, draw node 1 from its conditional marginal, and so on.
inline crf::Assignment sample_configuration(const crf::TreeTopology& topo, const crf::Potentials& pot, Rng& rng) {
    const int n = topo.size();
    crf::Assignment clamp(static_cast<std::size_t>(n), crf::kUnset);
    for (int k = 0; k < n; ++k) {
        const auto res = crf::marginals(topo, pot, clamp);
        clamp[static_cast<std::size_t>(k)] = uniform01(rng) < res.node_marginals(k) ? 1 : 0;
    }
    return clamp;
}

inline SyntheticDataset sample_dataset(const GroundTruthModel& model, int n, std::uint64_t seed) {
    if (n < 1) throw InvalidInput("sample_dataset: n must be at least 1");
    model.validate();
    Rng rng(seed);
    const auto& tree = model.tree;
    const int l = tree.observed_count();
    const int h = tree.latent_count();
    const crf::TreeTopology topo(tree);

    SyntheticDataset out;
    out.data.features.resize(n, model.centers.cols());
    out.data.labels.resize(n, l);
    out.data.label_names = tree.observed;
    out.data.scenes.emplace();
    out.hidden.resize(n, h);
    for (int i = 0; i < n; ++i) {
        const int c = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(model.clusters())));
        for (Eigen::Index j = 0; j < model.centers.cols(); ++j) {
            out.data.features(i, j) = model.centers(c, j) + model.noise_scale * standard_normal(rng);
        }
        const auto z = sample_configuration(topo, model.cluster_potentials[static_cast<std::size_t>(c)], rng);
        for (int k = 0; k < l; ++k) out.data.labels(i, k) = z[static_cast<std::size_t>(k)];
        for (int k = 0; k < h; ++k) out.hidden(i, k) = z[static_cast<std::size_t>(l + k)];
        out.cluster.push_back(c);
        out.data.scenes->push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model construction helpers

/// Random tree over `observed` + `latent` nodes in which every latent node has
/// degree >= 3. Observed nodes may be internal.
inline LatentTree random_latent_tree(int observed, int latent, Rng& rng) {
    if (observed < 1 || latent < 0) throw InvalidInput("random_latent_tree: bad node counts");
    if (latent > 0 && observed < latent + 2) throw InvalidInput("random_latent_tree: need observed >= latent + 2");
    // Latent backbone: node h_i attaches to a random earlier latent node of degree < 3.
    std::vector<int> degree(static_cast<std::size_t>(latent), 0);
    LatentTree t;
    for (int i = 0; i < observed; ++i) t.observed.push_back("y" + std::to_string(i));
    for (int i = 0; i < latent; ++i) t.latent.push_back("h" + std::to_string(i + 1));
    for (int i = 1; i < latent; ++i) {
        std::vector<int> open;
        for (int j = 0; j < i; ++j)
            if (degree[static_cast<std::size_t>(j)] < 3) open.push_back(j);
        const int j = open[uniform_index(rng, open.size())];
        t.edges.emplace_back(observed + j, observed + i);
        ++degree[static_cast<std::size_t>(i)];
        ++degree[static_cast<std::size_t>(j)];
    }
    int deficit = 0;
    for (int d : degree) deficit += std::max(0, 3 - d);
    if (deficit > observed) throw InvalidInput("random_latent_tree: too few observed nodes for the latent count");

    std::vector<int> obs(static_cast<std::size_t>(observed));
    for (int i = 0; i < observed; ++i) obs[static_cast<std::size_t>(i)] = i;
    shuffle_in_place(obs, rng);
    std::size_t next = 0;
    for (int i = 0; i < latent; ++i) {
        while (degree[static_cast<std::size_t>(i)] < 3) {
            t.edges.emplace_back(obs[next++], observed + i);
            ++degree[static_cast<std::size_t>(i)];
        }
    }
    std::vector<int> placed(obs.begin(), obs.begin() + static_cast<std::ptrdiff_t>(next));
    for (int i = 0; i < latent; ++i) placed.push_back(observed + i);
    for (; next < obs.size(); ++next) {
        const int v = obs[next];
        if (placed.empty()) {
            placed.push_back(v);
            continue;
        }
        const int w = placed[uniform_index(rng, placed.size())];
        t.edges.emplace_back(v, w);
        placed.push_back(v);
    }
    t.canonicalize();
    t.validate();
    return t;
}

/// All-pairs path lengths over the tree's nodes (observed first).
inline Matrix path_distances(const LatentTree& tree, const Vector& edge_lengths) {
    const int n = tree.node_count();
    if (edge_lengths.size() != static_cast<Eigen::Index>(tree.edges.size())) {
        throw InvalidInput("path_distances: one length per edge required");
    }
    std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(n));
    for (std::size_t e = 0; e < tree.edges.size(); ++e) {
        const auto [a, b] = tree.edges[e];
        adj[static_cast<std::size_t>(a)].emplace_back(b, edge_lengths(static_cast<Eigen::Index>(e)));
        adj[static_cast<std::size_t>(b)].emplace_back(a, edge_lengths(static_cast<Eigen::Index>(e)));
    }
    Matrix d = Matrix::Zero(n, n);
    for (int s = 0; s < n; ++s) {
        std::vector<int> stack{s};
        std::vector<char> seen(static_cast<std::size_t>(n), 0);
        seen[static_cast<std::size_t>(s)] = 1;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            for (const auto& [w, len] : adj[static_cast<std::size_t>(v)]) {
                if (seen[static_cast<std::size_t>(w)]) continue;
                seen[static_cast<std::size_t>(w)] = 1;
                d(s, w) = d(s, v) + len;
                stack.push_back(w);
            }
        }
    }
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) d(b, a) = d(a, b);
    return d;
}

/// Observed-block distance matrix of an additive tree metric.
inline kernel::DistanceMatrix tree_metric(const LatentTree& tree, const Vector& edge_lengths) {
    const Matrix full = path_distances(tree, edge_lengths);
    const int l = tree.observed_count();
    kernel::DistanceMatrix dm;
    dm.entries = full.topLeftCorner(l, l);
    dm.names = tree.observed;
    dm.clamp_ceiling = std::max(20.0, dm.entries.maxCoeff());
    return dm;
}

/// Node potentials that make every marginal 1/2 for the given couplings:
/// phi_k = -(1/2) sum of incident edge potentials.
inline Vector balanced_node_potentials(const LatentTree& tree, const Vector& edge_potentials) {
    Vector node = Vector::Zero(tree.node_count());
    for (std::size_t e = 0; e < tree.edges.size(); ++e) {
        const double w = edge_potentials(static_cast<Eigen::Index>(e));
        node(tree.edges[e].first) -= 0.5 * w;
        node(tree.edges[e].second) -= 0.5 * w;
    }
    return node;
}

struct ModelRecipe {
    int observed = 8;
    int latent = 2;
    int clusters = 3;
    int dim = 4;
    double noise_scale = 0.05;
    double center_radius = 5.0;
    double coupling_min = 3.0;  // |edge potential| range; couplings favor co-activation
    double coupling_max = 5.0;
    double node_offset = 1.0;   // per-cluster node potential jitter around the balanced point
};

/// Random ground truth: random minimal latent tree, shared edge couplings,
/// per-cluster node potentials, centers drawn on a sphere of the given radius
/// and rejected until pairwise separation is at least 6x the noise scale.
inline GroundTruthModel random_ground_truth(const ModelRecipe& recipe, Rng& rng) {
    GroundTruthModel m;
    m.tree = random_latent_tree(recipe.observed, recipe.latent, rng);
    m.noise_scale = recipe.noise_scale;
    Vector edge(static_cast<Eigen::Index>(m.tree.edges.size()));
    for (Eigen::Index e = 0; e < edge.size(); ++e) {
        edge(e) = -(recipe.coupling_min + (recipe.coupling_max - recipe.coupling_min) * uniform01(rng));
    }
    const Vector base = balanced_node_potentials(m.tree, edge);
    for (int c = 0; c < recipe.clusters; ++c) {
        crf::Potentials p;
        p.edge = edge;
        p.node = base;
        for (Eigen::Index k = 0; k < p.node.size(); ++k) {
            p.node(k) += recipe.node_offset * (2.0 * uniform01(rng) - 1.0);
        }
        m.cluster_potentials.push_back(std::move(p));
    }
    m.centers.resize(recipe.clusters, recipe.dim);
    for (int attempt = 0;; ++attempt) {
        for (int c = 0; c < recipe.clusters; ++c) {
            Vector v(recipe.dim);
            for (int j = 0; j < recipe.dim; ++j) v(j) = standard_normal(rng);
            m.centers.row(c) = recipe.center_radius * v.normalized().transpose();
        }
        bool ok = true;
        for (int a = 0; a < recipe.clusters && ok; ++a)
            for (int b = a + 1; b < recipe.clusters && ok; ++b)
                ok = (m.centers.row(a) - m.centers.row(b)).norm() >= std::max(6.0 * recipe.noise_scale, 0.5 * recipe.center_radius);
        if (ok) break;
        if (attempt > 1000) throw InvalidInput("random_ground_truth: cannot separate cluster centers");
    }
    m.validate();
    return m;
}

}  // namespace cltm::synthetic
