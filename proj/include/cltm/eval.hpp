#pragma once

// Multi-label metrics, precision-recall curves, k-means and cluster-to-scene
// matching.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cltm/common.hpp"
#include "cltm/dataset.hpp"
#include "cltm/neural_potentials.hpp"
#include "cltm/tree_crf.hpp"

namespace cltm::eval {

inline double f_measure(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

struct Counts {
    long tp = 0, fp = 0, fn = 0;

    double precision() const { return tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
    double recall() const { return tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
    double f() const { return f_measure(precision(), recall()); }
};

struct LabelMetrics {
    Counts counts;
    double precision = 0.0, recall = 0.0, f = 0.0;
    bool no_positives = false;  // recall undefined, reported as 0
};

struct MetricsReport {
    std::vector<LabelMetrics> per_label;
    Counts micro_counts;
    double micro_precision = 0.0, micro_recall = 0.0, micro_f = 0.0;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f = 0.0;
};

inline void check_binary_shapes(const LabelMatrix& a, const LabelMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw InvalidInput("prf: prediction shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                           " != truth shape " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

inline MetricsReport prf(const LabelMatrix& pred, const LabelMatrix& truth) {
    check_binary_shapes(pred, truth);
    MetricsReport rep;
    for (Eigen::Index k = 0; k < truth.cols(); ++k) {
        LabelMetrics lm;
        for (Eigen::Index i = 0; i < truth.rows(); ++i) {
            const bool p = pred(i, k) != 0, t = truth(i, k) != 0;
            lm.counts.tp += p && t;
            lm.counts.fp += p && !t;
            lm.counts.fn += !p && t;
        }
        lm.precision = lm.counts.precision();
        lm.recall = lm.counts.recall();
        lm.f = lm.counts.f();
        lm.no_positives = lm.counts.tp + lm.counts.fn == 0;
        rep.micro_counts.tp += lm.counts.tp;
        rep.micro_counts.fp += lm.counts.fp;
        rep.micro_counts.fn += lm.counts.fn;
        rep.macro_precision += lm.precision;
        rep.macro_recall += lm.recall;
        rep.per_label.push_back(lm);
    }
    rep.micro_precision = rep.micro_counts.precision();
    rep.micro_recall = rep.micro_counts.recall();
    rep.micro_f = f_measure(rep.micro_precision, rep.micro_recall);
    if (!rep.per_label.empty()) {
        rep.macro_precision /= static_cast<double>(rep.per_label.size());
        rep.macro_recall /= static_cast<double>(rep.per_label.size());
    }
    rep.macro_f = f_measure(rep.macro_precision, rep.macro_recall);
    return rep;
}

// ---------------------------------------------------------------------------
// Precision-recall curves

struct PrPoint {
    double threshold, precision, recall;
};

struct PrCurve {
    std::vector<std::vector<PrPoint>> per_label;
    std::vector<PrPoint> micro;
};

/// 0.00, 0.01, ..., 1.00
inline std::vector<double> default_grid(int points = 101) {
    std::vector<double> g;
    for (int i = 0; i < points; ++i) g.push_back(static_cast<double>(i) / (points - 1));
    return g;
}

inline LabelMatrix threshold_scores(const Matrix& scores, double threshold) {
    LabelMatrix out(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index k = 0; k < scores.cols(); ++k) out(i, k) = scores(i, k) >= threshold ? 1 : 0;
    return out;
}

/// Decision at each threshold: score >= threshold.
inline PrCurve pr_curve(const Matrix& scores, const LabelMatrix& truth, const std::vector<double>& grid) {
    if (scores.rows() != truth.rows() || scores.cols() != truth.cols()) {
        throw InvalidInput("pr_curve: score and truth shapes differ");
    }
    if (grid.empty()) throw InvalidInput("pr_curve: empty threshold grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw InvalidInput("pr_curve: thresholds must lie in [0, 1]");
        if (i > 0 && !(grid[i] > grid[i - 1])) throw InvalidInput("pr_curve: grid must be strictly increasing");
    }
    PrCurve c;
    c.per_label.resize(static_cast<std::size_t>(truth.cols()));
    for (double th : grid) {
        const auto rep = prf(threshold_scores(scores, th), truth);
        for (std::size_t k = 0; k < rep.per_label.size(); ++k) {
            c.per_label[k].push_back({th, rep.per_label[k].precision, rep.per_label[k].recall});
        }
        c.micro.push_back({th, rep.micro_precision, rep.micro_recall});
    }
    return c;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
    std::vector<int> assignment;
    Matrix centers;
    double inertia = 0.0;
    int iterations = 0;
    std::vector<double> inertia_trace;  // per Lloyd iteration of the winning restart
};

namespace detail {

inline int nearest(const Matrix& x, Eigen::Index i, const Matrix& centers, double* dist = nullptr) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
        const double d = (x.row(i) - centers.row(c)).squaredNorm();
        if (d < bd) {
            bd = d;
            best = static_cast<int>(c);
        }
    }
    if (dist) *dist = bd;
    return best;
}

// Careful seeding: first center uniform, the rest with probability
// proportional to squared distance from the nearest chosen center.
inline Matrix seed_centers(const Matrix& x, int k, Rng& rng) {
    const Eigen::Index n = x.rows();
    Matrix centers(k, x.cols());
    centers.row(0) = x.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
    Vector d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = (x.row(i) - centers.row(0)).squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
        } else {
            double u = uniform01(rng) * total;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                u -= d2(i);
                if (u < 0.0) {
                    pick = i;
                    break;
                }
            }
        }
        centers.row(c) = x.row(pick);
        for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (x.row(i) - centers.row(c)).squaredNorm());
    }
    return centers;
}

inline KMeansResult lloyd(const Matrix& x, int k, Rng& rng, int max_iter) {
    const Eigen::Index n = x.rows();
    KMeansResult r;
    r.centers = seed_centers(x, k, rng);
    r.assignment.assign(static_cast<std::size_t>(n), -1);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int c = nearest(x, i, r.centers);
            if (c != r.assignment[static_cast<std::size_t>(i)]) {
                r.assignment[static_cast<std::size_t>(i)] = c;
                changed = true;
            }
        }
        double inertia = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            inertia += (x.row(i) - r.centers.row(r.assignment[static_cast<std::size_t>(i)])).squaredNorm();
        }
        r.inertia_trace.push_back(inertia);
        r.iterations = it + 1;
        if (!changed && it > 0) break;

        Matrix sums = Matrix::Zero(k, x.cols());
        std::vector<long> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(r.assignment[static_cast<std::size_t>(i)]) += x.row(i);
            ++counts[static_cast<std::size_t>(r.assignment[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                r.centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
                continue;
            }
            // Empty cluster: move it onto the point farthest from its center.
            Eigen::Index far = 0;
            double fd = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const int a = r.assignment[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(a)] <= 1) continue;
                const double d = (x.row(i) - r.centers.row(a)).squaredNorm();
                if (d > fd) {
                    fd = d;
                    far = i;
                }
            }
            if (fd < 0.0) continue;
            --counts[static_cast<std::size_t>(r.assignment[static_cast<std::size_t>(far)])];
            r.assignment[static_cast<std::size_t>(far)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            r.centers.row(c) = x.row(far);
        }
    }
    r.inertia = r.inertia_trace.back();
    return r;
}

}  // namespace detail

/// Best of `restarts` seeded runs by inertia; restart r uses derive_seed(seed, r).
inline KMeansResult kmeans(const Matrix& x, int k, int restarts = 20, std::uint64_t seed = 0, int max_iter = 300,
                           int threads = 1) {
    if (k < 1 || k > x.rows()) throw InvalidInput("kmeans: need 1 <= k <= n");
    if (restarts < 1) throw InvalidInput("kmeans: restarts must be >= 1");
    if (!x.allFinite()) throw InvalidInput("kmeans: non-finite input");
    std::vector<KMeansResult> runs(static_cast<std::size_t>(restarts));
    parallel_for(runs.size(), threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
            runs[r] = detail::lloyd(x, k, rng, max_iter);
        }
    });
    std::size_t best = 0;
    for (std::size_t r = 1; r < runs.size(); ++r)
        if (runs[r].inertia < runs[best].inertia) best = r;
    return runs[best];
}

// ---------------------------------------------------------------------------
// Assignment problem

/// Minimum-cost assignment of rows to distinct columns (rows <= cols) by the
/// shortest augmenting path method with potentials. Returns column per row.
inline std::vector<int> hungarian_min(const Matrix& cost) {
    const int n = static_cast<int>(cost.rows());
    const int m = static_cast<int>(cost.cols());
    if (n > m) throw InvalidInput("hungarian: more rows than columns");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
    std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] > 0) col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return col;
}

/// Maximum-weight one-to-one matching on a rectangular weight table.
/// Returns column per row, -1 for rows left unmatched.
inline std::vector<int> max_weight_matching(const Matrix& w) {
    const Eigen::Index s = std::max(w.rows(), w.cols());
    const double top = w.size() > 0 ? w.maxCoeff() : 0.0;
    Matrix cost = Matrix::Constant(s, s, top);  // padding cells carry zero weight
    cost.topLeftCorner(w.rows(), w.cols()) = top - w.array();
    const auto sq = hungarian_min(cost);
    std::vector<int> out(static_cast<std::size_t>(w.rows()), -1);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const int j = sq[static_cast<std::size_t>(i)];
        if (j < w.cols()) out[static_cast<std::size_t>(i)] = j;
    }
    return out;
}

struct ClusterEval {
    std::vector<int> assignment;
    std::vector<int> scene_ids;     // distinct scene labels, ascending (contingency columns)
    Eigen::MatrixXi contingency;    // k x S counts
    std::vector<int> matched_scene; // scene label per cluster, -1 if unmatched
    long matched = 0;
    double misclassification = 0.0;
};

inline ClusterEval match_clusters(const std::vector<int>& assignment, const std::vector<int>& scenes, int k) {
    if (assignment.size() != scenes.size()) throw InvalidInput("match_clusters: length mismatch");
    if (assignment.empty()) throw InvalidInput("match_clusters: no samples");
    ClusterEval ev;
    ev.assignment = assignment;
    std::map<int, int> col;
    for (int s : scenes) col.emplace(s, 0);
    for (auto& [s, c] : col) {
        c = static_cast<int>(ev.scene_ids.size());
        ev.scene_ids.push_back(s);
    }
    ev.contingency = Eigen::MatrixXi::Zero(k, static_cast<Eigen::Index>(ev.scene_ids.size()));
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        if (assignment[i] < 0 || assignment[i] >= k) throw InvalidInput("match_clusters: cluster id out of range");
        ++ev.contingency(assignment[i], col[scenes[i]]);
    }
    const auto m = max_weight_matching(ev.contingency.cast<double>());
    ev.matched_scene.assign(static_cast<std::size_t>(k), -1);
    for (int c = 0; c < k; ++c) {
        const int j = m[static_cast<std::size_t>(c)];
        if (j < 0) continue;
        ev.matched_scene[static_cast<std::size_t>(c)] = ev.scene_ids[static_cast<std::size_t>(j)];
        ev.matched += ev.contingency(c, j);
    }
    ev.misclassification = 1.0 - static_cast<double>(ev.matched) / static_cast<double>(assignment.size());
    return ev;
}

// ---------------------------------------------------------------------------
// Scene feature vectors

enum class SceneSource { Hidden, ObservedHidden, Baseline };

inline SceneSource parse_scene_source(const std::string& s) {
    if (s == "hidden") return SceneSource::Hidden;
    if (s == "observed+hidden") return SceneSource::ObservedHidden;
    if (s == "baseline") return SceneSource::Baseline;
    throw InvalidInput("unknown scene source '" + s + "' (expected hidden, observed+hidden or baseline)");
}

/// Unclamped node marginals per sample: latent nodes only, or all nodes.
inline Matrix scene_feature_vectors(const nn::CltmModel& model, const LabeledDataset& data, SceneSource source,
                                    int threads = 1) {
    if (source == SceneSource::Baseline) throw InvalidInput("scene_feature_vectors: baseline source needs a baseline model");
    const int first = source == SceneSource::Hidden ? model.tree.observed_count() : 0;
    const int m = model.tree.node_count() - first;
    if (m == 0) throw InvalidInput("scene_feature_vectors: tree has no latent nodes");
    const crf::TreeTopology topo(model.tree);
    Matrix out(data.size(), m);
    parallel_for(static_cast<std::size_t>(data.size()), threads, [&](std::size_t b, std::size_t e) {
        for (auto i = static_cast<Eigen::Index>(b); i < static_cast<Eigen::Index>(e); ++i) {
            const auto res = crf::marginals(topo, nn::potentials(model, data.features.row(i).transpose()));
            out.row(i) = res.node_marginals.segment(first, m).transpose();
        }
    });
    return out;
}

inline Matrix scene_feature_vectors(const nn::BaselineModel& model, const LabeledDataset& data) {
    Matrix out(data.size(), model.mlp.output_dim());
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        out.row(i) = nn::baseline_probabilities(model, data.features.row(i).transpose()).transpose();
    }
    return out;
}

}  // namespace cltm::eval
