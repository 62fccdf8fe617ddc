#include <gtest/gtest.h>

#include <cmath>

#include "cltm/synthetic.hpp"

using namespace cltm;
using namespace cltm::synthetic;

namespace {

LatentTree chain(int n) {
    LatentTree t;
    for (int i = 0; i < n; ++i) t.observed.push_back("y" + std::to_string(i));
    for (int i = 0; i + 1 < n; ++i) t.edges.push_back({i, i + 1});
    return t;
}

GroundTruthModel one_cluster(const LatentTree& t, const crf::Potentials& p) {
    GroundTruthModel m;
    m.tree = t;
    m.cluster_potentials = {p};
    m.centers = Matrix::Zero(1, 2);
    m.noise_scale = 0.1;
    return m;
}

crf::Potentials running_example() {
    return {Vector::Zero(2), Vector::Constant(1, -std::log(3.0))};
}

}  // namespace

TEST(Enumeration, RunningExampleJoint) {
    const auto m = one_cluster(chain(2), running_example());
    const auto j = exact_pairwise_joint(m, 0, 0, 1);
    EXPECT_NEAR(j(0, 0), 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(j(0, 1), 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(j(1, 0), 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(j(1, 1), 0.5, 1e-15);
    const auto diag = exact_pairwise_joint(m, 0, 1, 1);
    EXPECT_NEAR(diag(0, 0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(diag(1, 1), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(diag(0, 1), 0.0);
    EXPECT_EQ(diag(1, 0), 0.0);
}

TEST(Enumeration, BruteForceExamples) {
    const auto r = brute_force_inference(chain(2), running_example());
    EXPECT_NEAR(r.log_partition, std::log(6.0), 1e-15);
    EXPECT_EQ(r.map, (crf::Assignment{1, 1}));
    const auto z = brute_force_inference(chain(3), {Vector::Zero(3), Vector::Zero(2)});
    EXPECT_EQ(z.map, (crf::Assignment{0, 0, 0}));
    EXPECT_NEAR(z.log_partition, 3 * std::log(2.0), 1e-15);
    const auto p = enumerate_distribution(chain(2), running_example());
    ASSERT_EQ(p.size(), 4u);
    EXPECT_NEAR(p[3], 0.5, 1e-15);
}

TEST(Enumeration, RefusesLargeTrees) {
    const auto t = chain(kMaxEnumerationNodes + 1);
    crf::Potentials p{Vector::Zero(t.node_count()), Vector::Zero(t.node_count() - 1)};
    EXPECT_THROW(brute_force_inference(t, p), InvalidInput);
    EXPECT_THROW(enumerate_distribution(t, p), InvalidInput);
}

TEST(Sampling, RunningExampleFrequency) {
    const auto m = one_cluster(chain(2), running_example());
    const int n = 20000;
    const auto s = sample_dataset(m, n, 1);
    double both = 0.0;
    for (int i = 0; i < n; ++i) both += s.data.labels(i, 0) == 1 && s.data.labels(i, 1) == 1;
    const double sigma = std::sqrt(0.25 / n);
    EXPECT_LE(std::abs(both / n - 0.5), 3 * sigma);
}

TEST(Sampling, PairFrequenciesMatchExactJoints) {
    Rng rng(2);
    ModelRecipe r;
    r.observed = 5;
    r.latent = 1;
    r.clusters = 1;
    const auto m = random_ground_truth(r, rng);
    const int n = 20000;
    const auto s = sample_dataset(m, n, 3);
    for (int k = 0; k < 5; ++k) {
        for (int t = k + 1; t < 5; ++t) {
            const double expect = exact_pairwise_joint(m, 0, k, t)(1, 1);
            double f = 0.0;
            for (int i = 0; i < n; ++i) f += s.data.labels(i, k) == 1 && s.data.labels(i, t) == 1;
            EXPECT_LE(std::abs(f / n - expect), 3 * std::sqrt(expect * (1 - expect) / n) + 1e-12);
        }
    }
}

TEST(Sampling, DeterministicPerSeed) {
    Rng rng(4);
    const auto m = random_ground_truth(ModelRecipe{}, rng);
    const auto a = sample_dataset(m, 200, 9);
    const auto b = sample_dataset(m, 200, 9);
    const auto c = sample_dataset(m, 200, 10);
    EXPECT_EQ(a.data.features, b.data.features);
    EXPECT_EQ(a.data.labels, b.data.labels);
    EXPECT_EQ(a.hidden, b.hidden);
    EXPECT_EQ(a.cluster, b.cluster);
    EXPECT_NE(a.data.labels, c.data.labels);
    ASSERT_TRUE(a.data.scenes.has_value());
    EXPECT_EQ(*a.data.scenes, a.cluster);
    EXPECT_EQ(a.hidden.cols(), m.tree.latent_count());
}

TEST(Sampling, FeaturesNearCenters) {
    Rng rng(5);
    const auto m = random_ground_truth(ModelRecipe{}, rng);
    const auto s = sample_dataset(m, 500, 6);
    for (Eigen::Index i = 0; i < 500; ++i) {
        const double dist = (s.data.features.row(i) - m.centers.row(s.cluster[static_cast<std::size_t>(i)])).norm();
        EXPECT_LT(dist, 10 * m.noise_scale);
    }
}

TEST(ExactDistances, CorrelatedAndIndependentPairs) {
    const auto t = chain(2);
    crf::Potentials strong;
    strong.edge = Vector::Constant(1, -80.0);
    strong.node = balanced_node_potentials(t, strong.edge);
    const auto dc = exact_distance_matrix(one_cluster(t, strong), 0);
    EXPECT_NEAR(dc.entries(0, 1), 0.0, 1e-12);

    const auto di = exact_distance_matrix(one_cluster(t, {Vector::Zero(2), Vector::Zero(1)}), 0);
    EXPECT_EQ(di.entries(0, 1), 20.0);
    EXPECT_EQ(di.entries(0, 0), 0.0);
}

TEST(ExactDistances, AdditiveAlongPaths) {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const auto t = chain(3);
        crf::Potentials p;
        p.edge = Vector::NullaryExpr(2, [&] { return -(1.0 + 2.0 * uniform01(rng)); });
        p.node = balanced_node_potentials(t, p.edge);
        for (Eigen::Index k = 0; k < 3; ++k) p.node(k) += 0.8 * (2 * uniform01(rng) - 1);
        const auto d = exact_distance_matrix(one_cluster(t, p), 0);
        EXPECT_NEAR(d.entries(0, 2), d.entries(0, 1) + d.entries(1, 2), 1e-9);
    }
}

TEST(ExactDistances, LatentBlockIsTreeAdditive) {
    Rng rng(8);
    ModelRecipe r;
    r.observed = 6;
    r.latent = 2;
    r.clusters = 1;
    const auto m = random_ground_truth(r, rng);
    const auto d = exact_distance_matrix(m, 0, true);
    ASSERT_EQ(d.entries.rows(), 8);
    // Edge lengths from adjacent-pair distances reproduce every path length.
    Vector len(static_cast<Eigen::Index>(m.tree.edges.size()));
    for (std::size_t e = 0; e < m.tree.edges.size(); ++e)
        len(static_cast<Eigen::Index>(e)) = d.entries(m.tree.edges[e].first, m.tree.edges[e].second);
    const Matrix path = path_distances(m.tree, len);
    EXPECT_LT((path - d.entries).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Builders, RandomLatentTreeIsMinimal) {
    Rng rng(9);
    for (int rep = 0; rep < 100; ++rep) {
        const int l = 3 + static_cast<int>(uniform_index(rng, 10));
        const int h = static_cast<int>(uniform_index(rng, static_cast<std::size_t>((l - 2) / 2 + 1)));
        const auto t = random_latent_tree(l, h, rng);
        EXPECT_NO_THROW(t.validate());
        EXPECT_EQ(t.observed_count(), l);
        EXPECT_EQ(t.latent_count(), h);
        std::vector<int> deg(static_cast<std::size_t>(l + h), 0);
        for (const auto& [a, b] : t.edges) {
            ++deg[static_cast<std::size_t>(a)];
            ++deg[static_cast<std::size_t>(b)];
        }
        for (int v = l; v < l + h; ++v) EXPECT_GE(deg[static_cast<std::size_t>(v)], 3);
    }
    EXPECT_THROW(random_latent_tree(0, 0, rng), InvalidInput);
}

TEST(Builders, BalancedPotentialsGiveHalfMarginals) {
    Rng rng(10);
    for (int rep = 0; rep < 20; ++rep) {
        const auto t = random_latent_tree(7, 2, rng);
        crf::Potentials p;
        p.edge = Vector::NullaryExpr(static_cast<Eigen::Index>(t.edges.size()), [&] { return 8 * uniform01(rng) - 4; });
        p.node = balanced_node_potentials(t, p.edge);
        const auto r = crf::marginals(t, p);
        for (int v = 0; v < t.node_count(); ++v) EXPECT_NEAR(r.node_marginals(v), 0.5, 1e-12);
    }
}

TEST(Builders, GroundTruthValidation) {
    Rng rng(11);
    auto m = random_ground_truth(ModelRecipe{}, rng);
    EXPECT_EQ(m.clusters(), 3);
    EXPECT_NO_THROW(m.validate());
    auto close = m;
    close.centers.row(1) = close.centers.row(0);
    EXPECT_THROW(close.validate(), InvalidInput);
    auto bad = m;
    bad.cluster_potentials[0].node.resize(1);
    EXPECT_THROW(bad.validate(), InvalidInput);
    EXPECT_THROW(sample_dataset(m, 0, 1), InvalidInput);
    EXPECT_THROW(exact_pairwise_joint(m, 3, 0, 1), InvalidInput);
}
