#pragma once

// Conditional pairwise label distances from kernel conditional embeddings.
//
// For every query sample x^i the kernel ridge weights G^i = (K + mu I)^{-1} K(:, i)
// give an estimate of E[psi(Y_k) psi(Y_t)^T | X = x^i] as a 2x2 table. The
// information distance of a pair at that query is
//
//     d^i_kt = -log( |det P_kt| / sqrt(|det P_kk| |det P_tt|) )
//
// and the reported distance is the mean of d^i_kt over queries.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cltm/common.hpp"
#include "cltm/dataset.hpp"

namespace cltm::kernel {

struct GramMatrix {
    Matrix entries;
    double gamma = 1.0;

    Eigen::Index size() const { return entries.rows(); }
};

/// K[i][j] = exp(-gamma * ||x^i - x^j||^2).
inline GramMatrix rbf_gram(const Matrix& features, double gamma) {
    if (features.rows() < 1 || features.cols() < 1) {
        throw InvalidInput("rbf_gram: need at least one sample and one feature dimension");
    }
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
        throw InvalidInput("rbf_gram: gamma must be positive and finite");
    }
    if (!features.allFinite()) {
        throw InvalidInput("rbf_gram: non-finite feature values");
    }
    const Eigen::Index n = features.rows();
    const Vector sq = features.rowwise().squaredNorm();
    Matrix k = features * features.transpose();
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = j; i < n; ++i) {
            // Cancellation in |a|^2 + |b|^2 - 2ab can go slightly negative.
            const double d2 = i == j ? 0.0 : std::max(0.0, sq(i) + sq(j) - 2.0 * k(i, j));
            const double v = std::exp(-gamma * d2);
            k(i, j) = v;
            k(j, i) = v;
        }
    }
    return {std::move(k), gamma};
}

/// Cross kernel between row sets a and b.
inline Matrix rbf_cross(const Matrix& a, const Matrix& b, double gamma) {
    const Vector sa = a.rowwise().squaredNorm();
    const Vector sb = b.rowwise().squaredNorm();
    Matrix k = a * b.transpose();
    for (Eigen::Index j = 0; j < k.cols(); ++j) {
        for (Eigen::Index i = 0; i < k.rows(); ++i) {
            const double d2 = std::max(0.0, sa(i) + sb(j) - 2.0 * k(i, j));
            k(i, j) = std::exp(-gamma * d2);
        }
    }
    return k;
}

/// 1 / median squared pairwise distance. Zero-distance pairs are excluded. When
/// there are more than `max_pairs` pairs, `max_pairs` distinct-index pairs are
/// drawn with a fixed seed.
inline double median_bandwidth(const Matrix& features, std::size_t max_pairs = 2000,
                               std::uint64_t seed = 0) {
    const auto n = static_cast<std::size_t>(features.rows());
    if (n < 2) throw InvalidInput("median_bandwidth: need at least two samples");
    if (!features.allFinite()) throw InvalidInput("median_bandwidth: non-finite feature values");

    std::vector<double> d2;
    const std::size_t total_pairs = n * (n - 1) / 2;
    auto push = [&](std::size_t i, std::size_t j) {
        const double v = (features.row(static_cast<Eigen::Index>(i)) -
                          features.row(static_cast<Eigen::Index>(j)))
                             .squaredNorm();
        if (v > 0.0) d2.push_back(v);
    };
    if (total_pairs <= max_pairs) {
        d2.reserve(total_pairs);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) push(i, j);
    } else {
        Rng rng(seed);
        d2.reserve(max_pairs);
        for (std::size_t s = 0; s < max_pairs; ++s) {
            const std::size_t i = uniform_index(rng, n);
            std::size_t j = uniform_index(rng, n - 1);
            if (j >= i) ++j;
            push(i, j);
        }
    }
    if (d2.empty()) throw InvalidInput("degenerate feature set: all sampled points identical");
    std::sort(d2.begin(), d2.end());
    const std::size_t m = d2.size();
    const double median = m % 2 == 1 ? d2[m / 2] : 0.5 * (d2[m / 2 - 1] + d2[m / 2]);
    return 1.0 / median;
}

inline double effective_regularizer(double lambda, Eigen::Index n, bool scale_by_n) {
    return scale_by_n ? lambda * static_cast<double>(n) : lambda;
}

/// Factorizes K + mu I once (mu = lambda * n under the scaled convention) and
/// answers per-query weight solves.
class KernelRegressor {
public:
    KernelRegressor(const GramMatrix& gram, double lambda, bool scale_by_n = true)
        : gram_(&gram) {
        if (lambda < 0.0 || !std::isfinite(lambda)) {
            throw InvalidInput("kernel regression: lambda must be non-negative and finite");
        }
        const Eigen::Index n = gram.size();
        mu_ = effective_regularizer(lambda, n, scale_by_n);
        Matrix a = gram.entries;
        a.diagonal().array() += mu_;
        llt_.compute(a);
        const bool ok = llt_.info() == Eigen::Success;
        rcond_ = ok ? llt_.rcond() : 0.0;
        if (!ok || !(rcond_ > 1e-15)) {
            Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
            const auto& ev = eig.eigenvalues();
            const double cond = ev(0) > 0.0 ? ev(ev.size() - 1) / ev(0)
                                             : std::numeric_limits<double>::infinity();
            throw NumericalError("kernel regression: K + mu*I is not safely positive definite "
                                 "(mu = " + std::to_string(mu_) +
                                 ", condition estimate = " + std::to_string(cond) + ")");
        }
    }

    double regularizer() const { return mu_; }
    double rcond() const { return rcond_; }

    Vector weights(Eigen::Index query) const {
        if (query < 0 || query >= gram_->size()) {
            throw InvalidInput("kernel regression: query index out of range");
        }
        return llt_.solve(gram_->entries.col(query));
    }

    /// Weights for several queries at once, one column per query.
    Matrix weights(const std::vector<Eigen::Index>& queries) const {
        Matrix rhs(gram_->size(), static_cast<Eigen::Index>(queries.size()));
        for (std::size_t c = 0; c < queries.size(); ++c) {
            rhs.col(static_cast<Eigen::Index>(c)) = gram_->entries.col(queries[c]);
        }
        return llt_.solve(rhs);
    }

private:
    const GramMatrix* gram_;
    double mu_ = 0.0;
    double rcond_ = 0.0;
    Eigen::LLT<Matrix> llt_;
};

/// G solving (K + mu I) G = K(:, query).
inline Vector kernel_regression_weights(const GramMatrix& gram, Eigen::Index query, double lambda,
                                        bool scale_by_n = true) {
    return KernelRegressor(gram, lambda, scale_by_n).weights(query);
}

/// Low-rank variant over m uniformly drawn landmark columns. With C = K(:, S)
/// and W = K(S, S) = U L U^T, the Nystrom kernel C W^+ C^T equals F F^T for
/// F = C U_r L_r^{-1/2} (eigenvalues below 1e-12 of the largest dropped), so
/// G = F (F^T F + mu I)^{-1} F(query, :)^T, an r x r positive definite system.
class NystromRegressor {
public:
    NystromRegressor(const Matrix& features, std::size_t landmarks, double gamma, double lambda,
                     bool scale_by_n = true, std::uint64_t seed = 0) {
        const auto n = static_cast<std::size_t>(features.rows());
        if (landmarks < 1) throw InvalidInput("nystrom: landmark count must be at least 1");
        if (landmarks > n) throw InvalidInput("nystrom: more landmarks than samples");
        if (!(gamma > 0.0)) throw InvalidInput("nystrom: gamma must be positive");
        if (!features.allFinite()) throw InvalidInput("nystrom: non-finite feature values");

        std::vector<Eigen::Index> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<Eigen::Index>(i);
        if (landmarks < n) {
            Rng rng(seed);
            shuffle_in_place(all, rng);
            all.resize(landmarks);
            std::sort(all.begin(), all.end());
        }
        landmarks_ = all;

        Matrix centers(static_cast<Eigen::Index>(landmarks), features.cols());
        for (std::size_t c = 0; c < landmarks; ++c) {
            centers.row(static_cast<Eigen::Index>(c)) = features.row(landmarks_[c]);
        }
        const Matrix cross = rbf_cross(features, centers, gamma);  // n x m
        Matrix w(static_cast<Eigen::Index>(landmarks), static_cast<Eigen::Index>(landmarks));
        for (std::size_t c = 0; c < landmarks; ++c) {
            w.row(static_cast<Eigen::Index>(c)) = cross.row(landmarks_[c]);
        }
        w = 0.5 * (w + w.transpose());
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(w);
        if (eig.info() != Eigen::Success) throw NumericalError("nystrom: eigendecomposition failed");
        const Vector& ev = eig.eigenvalues();
        const double floor = 1e-12 * ev.maxCoeff();
        std::vector<Eigen::Index> keep;
        for (Eigen::Index i = 0; i < ev.size(); ++i)
            if (ev(i) > floor) keep.push_back(i);
        if (keep.empty()) throw NumericalError("nystrom: landmark kernel has no positive eigenvalues");
        Matrix proj(w.rows(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t c = 0; c < keep.size(); ++c) {
            proj.col(static_cast<Eigen::Index>(c)) = eig.eigenvectors().col(keep[c]) / std::sqrt(ev(keep[c]));
        }
        feat_ = cross * proj;  // n x r
        mu_ = effective_regularizer(lambda, features.rows(), scale_by_n);
        Matrix system = feat_.transpose() * feat_;
        system.diagonal().array() += mu_;
        llt_.compute(system);
        if (llt_.info() != Eigen::Success) throw NumericalError("nystrom: regularized system is not positive definite");
    }

    Vector weights(Eigen::Index query) const {
        if (query < 0 || query >= feat_.rows()) {
            throw InvalidInput("nystrom: query index out of range");
        }
        const Vector rhs = feat_.row(query).transpose();
        return feat_ * llt_.solve(rhs);
    }

    Matrix weights(const std::vector<Eigen::Index>& queries) const {
        Matrix rhs(feat_.cols(), static_cast<Eigen::Index>(queries.size()));
        for (std::size_t c = 0; c < queries.size(); ++c) {
            if (queries[c] < 0 || queries[c] >= feat_.rows()) throw InvalidInput("nystrom: query index out of range");
            rhs.col(static_cast<Eigen::Index>(c)) = feat_.row(queries[c]).transpose();
        }
        return feat_ * llt_.solve(rhs);
    }

    const std::vector<Eigen::Index>& landmarks() const { return landmarks_; }
    Eigen::Index rank() const { return feat_.cols(); }

private:
    std::vector<Eigen::Index> landmarks_;
    Matrix feat_;
    double mu_ = 0.0;
    Eigen::LLT<Matrix> llt_;
};

inline Vector nystrom_weights(const Matrix& features, std::size_t landmarks, double gamma,
                              double lambda, Eigen::Index query, bool scale_by_n = true,
                              std::uint64_t seed = 0) {
    return NystromRegressor(features, landmarks, gamma, lambda, scale_by_n, seed).weights(query);
}

/// Estimated joint of (Y_k, Y_t) at a query, indexed table(y_k, y_t).
struct ConditionalJoint {
    Eigen::Matrix2d table = Eigen::Matrix2d::Zero();
};

/// Clamp entries to [0, 1] and renormalize to unit mass.
inline Eigen::Matrix2d clean_table(const Eigen::Matrix2d& raw) {
    Eigen::Matrix2d t = raw.cwiseMax(0.0).cwiseMin(1.0);
    const double s = t.sum();
    if (!(s > 0.0) || !std::isfinite(s)) {
        throw NumericalError("empty conditional estimate: no positive mass after clamping");
    }
    return t / s;
}

/// sum_n weights[n] * psi(y^n_k) psi(y^n_t)^T with psi(0) = e_0, psi(1) = e_1,
/// followed by clamp-and-renormalize cleanup.
inline ConditionalJoint conditional_joint(const LabelMatrix& labels, Eigen::Index k, Eigen::Index t,
                                          const Vector& weights) {
    if (weights.size() != labels.rows()) {
        throw InvalidInput("conditional_joint: weight vector length does not match sample count");
    }
    if (k < 0 || t < 0 || k >= labels.cols() || t >= labels.cols()) {
        throw InvalidInput("conditional_joint: label index out of range");
    }
    if (weights.isZero(0.0)) throw InvalidInput("empty conditional estimate: all-zero weights");
    Eigen::Matrix2d raw = Eigen::Matrix2d::Zero();
    for (Eigen::Index n = 0; n < labels.rows(); ++n) {
        raw(labels(n, k), labels(n, t)) += weights(n);
    }
    return {clean_table(raw)};
}

struct DistanceParams {
    double det_floor = 1e-12;
    double clamp_ceiling = 20.0;
};

namespace detail {

// Returns NaN when either marginal determinant is below the floor.
inline double distance_or_nan(const Eigen::Matrix2d& joint, const Eigen::Matrix2d& mk,
                              const Eigen::Matrix2d& mt, const DistanceParams& p) {
    const double sk = std::abs(mk.determinant());
    const double st = std::abs(mt.determinant());
    if (sk < p.det_floor || st < p.det_floor) return std::numeric_limits<double>::quiet_NaN();
    const double s = std::max(std::abs(joint.determinant()), p.det_floor);
    const double d = -std::log(s / std::sqrt(sk * st));
    // Rounding can push a perfectly dependent pair a hair below zero.
    return std::clamp(d, 0.0, p.clamp_ceiling);
}

}  // namespace detail

/// Information distance of one pair at one query.
inline double pairwise_distance(const ConditionalJoint& joint, const ConditionalJoint& marg_k,
                                const ConditionalJoint& marg_t, const DistanceParams& params = {}) {
    const double d = detail::distance_or_nan(joint.table, marg_k.table, marg_t.table, params);
    if (std::isnan(d)) {
        throw DegenerateMarginal("degenerate marginal: a label is conditionally deterministic");
    }
    return d;
}

/// Symmetric L x L distance table with zero diagonal.
struct DistanceMatrix {
    Matrix entries;
    double clamp_ceiling = 20.0;
    std::vector<std::string> names;

    Eigen::Index size() const { return entries.rows(); }

    void validate() const {
        const Eigen::Index l = entries.rows();
        if (entries.cols() != l) throw InvalidInput("distance matrix: not square");
        if (!names.empty() && static_cast<Eigen::Index>(names.size()) != l) {
            throw InvalidInput("distance matrix: name count does not match size");
        }
        for (Eigen::Index i = 0; i < l; ++i) {
            if (entries(i, i) != 0.0) throw InvalidInput("distance matrix: nonzero diagonal");
            for (Eigen::Index j = i + 1; j < l; ++j) {
                const double a = entries(i, j);
                if (!std::isfinite(a)) {
                    throw InvalidInput("distance matrix: non-finite entry at (" + std::to_string(i) +
                                       ", " + std::to_string(j) + ")");
                }
                if (a != entries(j, i)) throw InvalidInput("distance matrix: not symmetric");
                if (a < 0.0 || a > clamp_ceiling) {
                    throw InvalidInput("distance matrix: entry outside [0, clamp_ceiling]");
                }
            }
        }
    }
};

struct CondDistanceOptions {
    std::optional<double> gamma;      // median heuristic when unset
    double lambda = 1e-3;
    bool scale_lambda_by_n = true;
    std::size_t query_subsample = 1000;  // 0 = use every sample
    std::size_t landmarks = 0;           // 0 = exact solve; otherwise Nystrom
    std::size_t gamma_pairs = 2000;
    DistanceParams distance;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct CondDistanceResult {
    DistanceMatrix distances;
    double gamma = 0.0;
    std::vector<std::string> dropped_labels;  // constant columns
    std::vector<Eigen::Index> kept_columns;
    std::vector<Eigen::Index> queries;
    std::size_t skipped_pair_queries = 0;  // (pair, query) cells dropped as degenerate
};

/// Per-query distance table (NaN where a marginal is degenerate) computed from
/// weights G over label columns `cols`. Uses the moment form
/// P11 = sum G y_k y_t, P10 = sum G y_k - P11, P01 = sum G y_t - P11, P00 = rest.
inline Matrix query_distance_table(const Matrix& y, const Vector& g, const DistanceParams& p) {
    const Eigen::Index l = y.cols();
    const double total = g.sum();
    const Vector s = y.transpose() * g;
    const Matrix a = y.transpose() * g.asDiagonal() * y;
    std::vector<Eigen::Matrix2d> marg(static_cast<std::size_t>(l));
    std::vector<char> degenerate(static_cast<std::size_t>(l), 0);
    for (Eigen::Index k = 0; k < l; ++k) {
        Eigen::Matrix2d raw = Eigen::Matrix2d::Zero();
        raw(0, 0) = total - s(k);
        raw(1, 1) = s(k);
        try {
            marg[static_cast<std::size_t>(k)] = clean_table(raw);
        } catch (const NumericalError&) {
            degenerate[static_cast<std::size_t>(k)] = 1;
        }
    }
    Matrix out = Matrix::Zero(l, l);
    for (Eigen::Index k = 0; k < l; ++k) {
        for (Eigen::Index t = k + 1; t < l; ++t) {
            double d = std::numeric_limits<double>::quiet_NaN();
            if (!degenerate[static_cast<std::size_t>(k)] && !degenerate[static_cast<std::size_t>(t)]) {
                Eigen::Matrix2d raw;
                raw(1, 1) = a(k, t);
                raw(1, 0) = s(k) - a(k, t);
                raw(0, 1) = s(t) - a(k, t);
                raw(0, 0) = total - s(k) - s(t) + a(k, t);
                try {
                    d = detail::distance_or_nan(clean_table(raw), marg[static_cast<std::size_t>(k)],
                                                marg[static_cast<std::size_t>(t)], p);
                } catch (const NumericalError&) {
                }
            }
            out(k, t) = d;
            out(t, k) = d;
        }
    }
    return out;
}

/// Averaged conditional information distances over (a subsample of) queries.
/// Constant label columns are dropped and reported. Per-query tables are
/// reduced in query-index order, so the result does not depend on `threads`.
inline CondDistanceResult cond_distance_matrix(const LabeledDataset& data,
                                               const CondDistanceOptions& opt = {}) {
    data.validate();
    const Eigen::Index n = data.size();
    if (n < 2) throw InvalidInput("cond_distance_matrix: need at least two samples");

    CondDistanceResult res;
    for (Eigen::Index c = 0; c < data.label_count(); ++c) {
        const auto ones = data.labels.col(c).sum();
        if (ones == 0 || ones == n) {
            res.dropped_labels.push_back(data.label_names[static_cast<std::size_t>(c)]);
        } else {
            res.kept_columns.push_back(c);
        }
    }
    const auto l = static_cast<Eigen::Index>(res.kept_columns.size());
    if (l < 2) throw InvalidInput("cond_distance_matrix: fewer than two non-constant labels");

    Matrix y(n, l);
    for (Eigen::Index c = 0; c < l; ++c) {
        y.col(c) = data.labels.col(res.kept_columns[static_cast<std::size_t>(c)]).cast<double>();
    }

    res.gamma = opt.gamma ? *opt.gamma
                          : median_bandwidth(data.features, opt.gamma_pairs,
                                             derive_seed(opt.seed, "median_bandwidth"));

    // Query subsample: uniform without replacement, then sorted.
    std::vector<Eigen::Index> queries(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) queries[static_cast<std::size_t>(i)] = i;
    if (opt.query_subsample > 0 && opt.query_subsample < static_cast<std::size_t>(n)) {
        Rng rng(derive_seed(opt.seed, "query_subsample"));
        shuffle_in_place(queries, rng);
        queries.resize(opt.query_subsample);
        std::sort(queries.begin(), queries.end());
    }
    res.queries = queries;

    std::optional<GramMatrix> gram;
    std::optional<KernelRegressor> exact;
    std::optional<NystromRegressor> nystrom;
    if (opt.landmarks > 0) {
        nystrom.emplace(data.features, std::min<std::size_t>(opt.landmarks, static_cast<std::size_t>(n)),
                        res.gamma, opt.lambda, opt.scale_lambda_by_n,
                        derive_seed(opt.seed, "nystrom"));
    } else {
        gram.emplace(rbf_gram(data.features, res.gamma));
        exact.emplace(*gram, opt.lambda, opt.scale_lambda_by_n);
    }

    const std::size_t q = queries.size();
    std::vector<Matrix> tables(q);
    auto work = [&](std::size_t begin, std::size_t end) {
        constexpr std::size_t kBlock = 64;
        for (std::size_t b = begin; b < end; b += kBlock) {
            const std::size_t e = std::min(end, b + kBlock);
            std::vector<Eigen::Index> block(queries.begin() + static_cast<std::ptrdiff_t>(b),
                                            queries.begin() + static_cast<std::ptrdiff_t>(e));
            const Matrix g = exact ? exact->weights(block) : nystrom->weights(block);
            for (std::size_t c = 0; c < block.size(); ++c) {
                tables[b + c] = query_distance_table(y, g.col(static_cast<Eigen::Index>(c)), opt.distance);
            }
        }
    };
    parallel_for(q, opt.threads, work);

    Matrix sum = Matrix::Zero(l, l);
    Eigen::MatrixXi count = Eigen::MatrixXi::Zero(l, l);
    for (const auto& tab : tables) {
        for (Eigen::Index k = 0; k < l; ++k) {
            for (Eigen::Index t = k + 1; t < l; ++t) {
                const double d = tab(k, t);
                if (std::isnan(d)) {
                    ++res.skipped_pair_queries;
                    continue;
                }
                sum(k, t) += d;
                ++count(k, t);
            }
        }
    }
    DistanceMatrix dm;
    dm.entries = Matrix::Zero(l, l);
    dm.clamp_ceiling = opt.distance.clamp_ceiling;
    for (Eigen::Index k = 0; k < l; ++k) {
        dm.names.push_back(data.label_names[static_cast<std::size_t>(res.kept_columns[static_cast<std::size_t>(k)])]);
    }
    for (Eigen::Index k = 0; k < l; ++k) {
        for (Eigen::Index t = k + 1; t < l; ++t) {
            if (count(k, t) == 0) {
                throw NumericalError("cond_distance_matrix: every query is degenerate for pair (" +
                                     dm.names[static_cast<std::size_t>(k)] + ", " +
                                     dm.names[static_cast<std::size_t>(t)] + ")");
            }
            const double d = sum(k, t) / static_cast<double>(count(k, t));
            dm.entries(k, t) = d;
            dm.entries(t, k) = d;
        }
    }
    res.distances = std::move(dm);
    return res;
}

}  // namespace cltm::kernel
