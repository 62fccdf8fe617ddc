#include <gtest/gtest.h>

#include <cmath>

#include "cltm/neural_potentials.hpp"
#include "cltm/synthetic.hpp"

using namespace cltm;
using namespace cltm::nn;

namespace {

// Model whose potentials are exactly `node` for every input (zero weights, bias = node).
CltmModel constant_model(const LatentTree& t, const Vector& node, const Vector& edge, Eigen::Index d = 1) {
    CltmModel m;
    m.tree = t;
    m.mlp.layers.push_back({Matrix::Zero(t.node_count(), d), node});
    m.edge_potentials = edge;
    m.standardizer = Standardizer::identity(d);
    return m;
}

LatentTree obs_hidden_pair() {
    LatentTree t;
    t.observed = {"y"};
    t.latent = {"h1"};
    t.edges = {{0, 1}};
    return t;  // latent degree 1: fine for inference, not a valid learned tree
}

CltmModel random_model(const LatentTree& t, Eigen::Index d, const std::vector<int>& hidden, Rng& rng) {
    CltmModel m;
    m.tree = t;
    m.mlp = init_mlp(d, hidden, t.node_count(), 0.0, rng);
    for (auto& l : m.mlp.layers)
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.5 * (2 * uniform01(rng) - 1);
    m.edge_potentials.resize(static_cast<Eigen::Index>(t.edges.size()));
    for (Eigen::Index e = 0; e < m.edge_potentials.size(); ++e) m.edge_potentials(e) = 2.0 * (2 * uniform01(rng) - 1);
    m.standardizer = Standardizer::identity(d);
    return m;
}

LabeledDataset noise_data(const LatentTree& t, int n, Eigen::Index d, Rng& rng) {
    LabeledDataset data;
    data.features.resize(n, d);
    data.labels.resize(n, t.observed_count());
    data.label_names = t.observed;
    for (int i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) data.features(i, j) = standard_normal(rng);
        for (int k = 0; k < t.observed_count(); ++k) data.labels(i, k) = uniform01(rng) < 0.5;
    }
    return data;
}

std::vector<Eigen::Index> all_rows(const LabeledDataset& d) {
    std::vector<Eigen::Index> r;
    for (Eigen::Index i = 0; i < d.size(); ++i) r.push_back(i);
    return r;
}

}  // namespace

TEST(MlpForward, IdentityLayer) {
    MlpParameters p;
    p.layers.push_back({Matrix::Identity(3, 3), Vector::Zero(3)});
    Vector x(3);
    x << 0.5, -2.0, 7.0;
    EXPECT_EQ(mlp_forward(p, x), x);
    EXPECT_THROW(mlp_forward(p, Vector::Zero(2)), InvalidInput);
}

TEST(MlpForward, ZeroParametersGiveHalfMarginals) {
    Rng rng(1);
    const auto t = synthetic::random_latent_tree(5, 1, rng);
    auto mlp = init_mlp(4, {6, 5}, t.node_count(), 0.0, rng, true);
    CltmModel m{t, mlp, Vector::Zero(5), Standardizer::identity(4), {}};
    const auto r = predict(m, Vector::Ones(4));
    for (int v = 0; v < t.node_count(); ++v) EXPECT_DOUBLE_EQ(r.node_marginals(v), 0.5);
}

TEST(MlpForward, NoDropoutTrainEqualsEval) {
    Rng rng(2);
    auto p = init_mlp(4, {8, 8}, 3, 0.0, rng);
    Vector x = Vector::Random(4);
    Rng mask(3);
    EXPECT_EQ(mlp_forward(p, x, Mode::Train, &mask), mlp_forward(p, x, Mode::Eval));
}

TEST(MlpForward, InvertedDropoutMask) {
    Rng rng(4);
    auto p = init_mlp(4, {50}, 3, 0.5, rng);
    Rng mask_rng(5);
    ForwardCache cache;
    mlp_forward(p, Vector::Ones(4), Mode::Train, &mask_rng, &cache);
    ASSERT_EQ(cache.mask.size(), 1u);
    int zeros = 0;
    for (Eigen::Index i = 0; i < cache.mask[0].size(); ++i) {
        const double v = cache.mask[0](i);
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        zeros += v == 0.0;
    }
    EXPECT_GT(zeros, 10);
    EXPECT_LT(zeros, 40);
}

TEST(MarginalNll, SingleUniformBit) {
    LatentTree t;
    t.observed = {"y"};
    const auto m = constant_model(t, Vector::Zero(1), Vector(0));
    EXPECT_NEAR(marginal_nll_loss(m, Vector::Zero(1), {1}), std::log(2.0), 1e-15);
}

TEST(MarginalNll, ObservedHiddenPairEnumerated) {
    const auto m = constant_model(obs_hidden_pair(), Vector::Zero(2), Vector::Constant(1, -std::log(3.0)));
    EXPECT_NEAR(marginal_nll_loss(m, Vector::Zero(1), {1}), std::log(6.0) - std::log(4.0), 1e-14);
    EXPECT_NEAR(marginal_nll_loss(m, Vector::Zero(1), {1}), 0.4054651081081644, 1e-14);
}

TEST(MarginalNll, EqualsLogPartitionDifferenceAndNonNegative) {
    Rng rng(6);
    for (int rep = 0; rep < 100; ++rep) {
        const int l = 2 + static_cast<int>(uniform_index(rng, 7));
        const int h = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(std::min(3, l / 2))));
        const auto t = synthetic::random_latent_tree(l, h, rng);
        const auto m = random_model(t, 3, {4}, rng);
        Vector x(3);
        for (int j = 0; j < 3; ++j) x(j) = standard_normal(rng);
        std::vector<int> y(static_cast<std::size_t>(l));
        for (auto& v : y) v = uniform01(rng) < 0.5;
        const auto pot = potentials(m, x);
        crf::Assignment clamp(static_cast<std::size_t>(t.node_count()), crf::kUnset);
        for (int k = 0; k < l; ++k) clamp[static_cast<std::size_t>(k)] = y[static_cast<std::size_t>(k)];
        const double expect = synthetic::brute_force_inference(t, pot).log_partition -
                              synthetic::brute_force_inference(t, pot, clamp).log_partition;
        const double loss = marginal_nll_loss(m, x, y);
        EXPECT_NEAR(loss, expect, 1e-9);
        EXPECT_GE(loss, 0.0);
    }
}

TEST(LossGradient, SingleUniformBitIsHalf) {
    LatentTree t;
    t.observed = {"y"};
    const auto pg = potential_gradient(crf::TreeTopology(t), {Vector::Zero(1), Vector(0)}, {1});
    EXPECT_DOUBLE_EQ(pg.node(0), 0.5);
}

TEST(LossGradient, MomentMatchedModelHasZeroGradient) {
    // Two independent observed bits with zero coupling; data = all four label
    // combinations once each, so clamped and free moments agree on average.
    LatentTree t;
    t.observed = {"a", "b"};
    t.edges = {{0, 1}};
    auto m = constant_model(t, Vector::Zero(2), Vector::Zero(1));
    LabeledDataset data;
    data.features = Matrix::Zero(4, 1);
    data.labels.resize(4, 2);
    data.labels << 0, 0, 0, 1, 1, 0, 1, 1;
    data.label_names = t.observed;
    const auto g = loss_gradient(m, data, all_rows(data), 0.0);
    EXPECT_LT(flatten_gradient(g).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(LossGradient, ObservedNodeIdentity) {
    Rng rng(7);
    for (int rep = 0; rep < 30; ++rep) {
        const auto t = synthetic::random_latent_tree(6, 2, rng);
        const auto m = random_model(t, 3, {5}, rng);
        Vector x = Vector::Random(3);
        std::vector<int> y(6);
        for (auto& v : y) v = uniform01(rng) < 0.5;
        const crf::TreeTopology topo(t);
        const auto pot = potentials(m, x);
        const auto pg = potential_gradient(topo, pot, observed_clamp(t, y));
        const auto free = crf::marginals(topo, pot);
        for (int k = 0; k < 6; ++k) {
            EXPECT_NEAR(pg.node(k), y[static_cast<std::size_t>(k)] - free.node_marginals(k), 1e-12);
        }
    }
}

TEST(LossGradient, FiniteDifferencesAllDepths) {
    Rng rng(8);
    int cases = 0;
    double worst = 0.0;
    for (int rep = 0; rep < 60; ++rep) {
        const int depth = 1 + rep % 3;
        std::vector<int> hidden;
        if (depth >= 2) hidden.push_back(5);
        if (depth == 3) hidden.push_back(4);
        const auto t = synthetic::random_latent_tree(4 + rep % 3, 1 + rep % 2, rng);
        auto m = random_model(t, 4, hidden, rng);
        const auto data = noise_data(t, 3, 4, rng);
        const auto rows = all_rows(data);
        const double l2 = rep % 2 ? 1e-3 : 0.0;
        const Vector analytic = flatten_gradient(loss_gradient(m, data, rows, l2));
        Vector theta = flatten_parameters(m);
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            Vector tp = theta, tm = theta;
            tp(i) += h;
            tm(i) -= h;
            assign_parameters(m, tp);
            const double fp = loss_gradient(m, data, rows, l2).loss;
            assign_parameters(m, tm);
            const double fm = loss_gradient(m, data, rows, l2).loss;
            const double fd = (fp - fm) / (2 * h);
            const double rel = std::abs(fd - analytic(i)) / std::max({std::abs(fd), std::abs(analytic(i)), 1e-8});
            worst = std::max(worst, rel);
            EXPECT_LE(rel, 1e-4) << "case " << rep << " param " << i << " fd " << fd << " analytic " << analytic(i);
        }
        assign_parameters(m, theta);
        ++cases;
    }
    EXPECT_GE(cases, 50);
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(SgdTrain, SingleSampleLogisticFit) {
    LatentTree t;
    t.observed = {"y"};
    LabeledDataset data;
    data.features = Matrix::Constant(1, 1, 0.3);
    data.labels = LabelMatrix::Ones(1, 1);
    data.label_names = {"y"};
    TrainConfig cfg;
    cfg.hidden = {};
    cfg.dropout_rate = 0.0;
    cfg.learning_rate = 0.5;
    cfg.epochs = 200;
    const auto res = sgd_train(data, t, cfg);
    EXPECT_GE(predict(res.model, data.features.row(0).transpose()).node_marginals(0), 0.95);
    EXPECT_EQ(res.loss_trace.size(), 200u);
}

TEST(SgdTrain, ZeroEpochsReturnsInitialization) {
    Rng rng(9);
    const auto t = synthetic::random_latent_tree(5, 1, rng);
    const auto data = noise_data(t, 20, 3, rng);
    TrainConfig cfg;
    cfg.hidden = {6};
    cfg.epochs = 0;
    const auto res = sgd_train(data, t, cfg);
    const auto init = init_model(data, t, cfg);
    EXPECT_EQ(flatten_parameters(res.model), flatten_parameters(init));
    EXPECT_TRUE(res.loss_trace.empty());
}

TEST(SgdTrain, DeterministicAndThreadInvariant) {
    Rng rng(10);
    const auto t = synthetic::random_latent_tree(5, 1, rng);
    const auto data = noise_data(t, 60, 3, rng);
    TrainConfig cfg;
    cfg.hidden = {8, 6};
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.seed = 42;
    const auto a = sgd_train(data, t, cfg);
    const auto b = sgd_train(data, t, cfg);
    cfg.threads = 3;
    const auto c = sgd_train(data, t, cfg);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
    EXPECT_EQ(flatten_parameters(a.model), flatten_parameters(b.model));
    EXPECT_EQ(flatten_parameters(a.model), flatten_parameters(c.model));
}

TEST(SgdTrain, DivergenceReportsEpoch) {
    Rng rng(11);
    const auto t = synthetic::random_latent_tree(4, 1, rng);
    auto data = noise_data(t, 40, 2, rng);
    data.features *= 1e150;
    TrainConfig cfg;
    cfg.hidden = {};
    cfg.dropout_rate = 0.0;
    cfg.learning_rate = 1e300;
    cfg.epochs = 5;
    try {
        sgd_train(data, t, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_GE(e.epoch(), 0);
    }
}

TEST(SgdTrain, RejectsMismatchedLabels) {
    Rng rng(12);
    const auto t = synthetic::random_latent_tree(4, 1, rng);
    auto data = noise_data(t, 10, 2, rng);
    data.label_names[0] = "other";
    EXPECT_THROW(sgd_train(data, t, TrainConfig{}), InvalidInput);
}

namespace {

synthetic::GroundTruthModel correlated_truth(std::uint64_t seed) {
    Rng rng(seed);
    synthetic::ModelRecipe r;
    r.observed = 6;
    r.latent = 1;
    r.clusters = 2;
    r.dim = 3;
    r.coupling_min = 3.0;
    r.coupling_max = 5.0;
    r.node_offset = 1.0;
    return synthetic::random_ground_truth(r, rng);
}

double empirical_independent_nll(const LabeledDataset& d, const std::vector<int>& cluster, int clusters) {
    // Best product-of-independent-bits model given the cluster: per-cluster label frequencies.
    double total = 0.0;
    for (int c = 0; c < clusters; ++c) {
        std::vector<int> rows;
        for (std::size_t i = 0; i < cluster.size(); ++i)
            if (cluster[i] == c) rows.push_back(static_cast<int>(i));
        for (Eigen::Index k = 0; k < d.label_count(); ++k) {
            double p = 0.0;
            for (int r : rows) p += d.labels(r, k);
            p /= static_cast<double>(rows.size());
            if (p > 0.0 && p < 1.0) total -= static_cast<double>(rows.size()) * (p * std::log(p) + (1 - p) * std::log(1 - p));
        }
    }
    return total / static_cast<double>(d.size());
}

}  // namespace

TEST(SgdTrain, BeatsBestIndependentModelOnCorrelatedData) {
    const auto truth = correlated_truth(13);
    const auto sample = synthetic::sample_dataset(truth, 1500, 14);
    TrainConfig cfg;
    cfg.hidden = {16};
    cfg.dropout_rate = 0.0;
    cfg.epochs = 40;
    cfg.batch_size = 50;
    cfg.learning_rate = 0.1;
    const auto res = sgd_train(sample.data, truth.tree, cfg);
    const double cltm = mean_nll(res.model, sample.data);
    const double indep = empirical_independent_nll(sample.data, sample.cluster, truth.clusters());
    EXPECT_LT(cltm, indep);
}

TEST(SgdTrain, HeldOutNllDecreasesOverFirstEpochs) {
    int monotone = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto truth = correlated_truth(100 + seed);
        const auto train = synthetic::sample_dataset(truth, 1000, 200 + seed);
        const auto held = synthetic::sample_dataset(truth, 400, 300 + seed);
        TrainConfig cfg;
        cfg.hidden = {16};
        cfg.seed = seed;
        cfg.batch_size = 250;
        std::vector<double> trace;
        for (int e = 0; e <= 5; ++e) {
            cfg.epochs = e;
            trace.push_back(mean_nll(sgd_train(train.data, truth.tree, cfg).model, held.data));
        }
        bool ok = true;
        for (std::size_t i = 1; i < trace.size(); ++i) ok = ok && trace[i] < trace[i - 1];
        monotone += ok;
    }
    EXPECT_GE(monotone, 8);
}

TEST(Baseline, SeparableOneDimensional) {
    LabeledDataset data;
    data.features.resize(40, 1);
    data.labels.resize(40, 1);
    data.label_names = {"y"};
    for (int i = 0; i < 40; ++i) {
        data.features(i, 0) = i < 20 ? -1.0 - 0.05 * i : 1.0 + 0.05 * i;
        data.labels(i, 0) = i >= 20;
    }
    TrainConfig cfg;
    cfg.hidden = {};
    cfg.dropout_rate = 0.0;
    cfg.learning_rate = 0.5;
    cfg.epochs = 300;
    cfg.batch_size = 40;
    const auto res = independent_baseline_train(data, cfg);
    int correct = 0;
    for (int i = 0; i < 40; ++i) {
        const double p = baseline_probabilities(res.model, data.features.row(i).transpose())(0);
        correct += (p >= 0.5) == (data.labels(i, 0) == 1);
    }
    EXPECT_EQ(correct, 40);
}

TEST(Baseline, ZeroEpochsZeroInitIsHalf) {
    Rng rng(15);
    LatentTree t = synthetic::random_latent_tree(3, 0, rng);
    const auto data = noise_data(t, 10, 2, rng);
    TrainConfig cfg;
    cfg.hidden = {4};
    cfg.epochs = 0;
    cfg.zero_init = true;
    const auto res = independent_baseline_train(data, cfg);
    const Vector p = baseline_probabilities(res.model, data.features.row(3).transpose());
    for (Eigen::Index k = 0; k < p.size(); ++k) EXPECT_EQ(p(k), 0.5);
}

TEST(Baseline, SameSeedIdentical) {
    Rng rng(16);
    LatentTree t = synthetic::random_latent_tree(3, 0, rng);
    const auto data = noise_data(t, 50, 2, rng);
    TrainConfig cfg;
    cfg.hidden = {6, 4};
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const auto a = independent_baseline_train(data, cfg);
    const auto b = independent_baseline_train(data, cfg);
    for (std::size_t i = 0; i < a.model.mlp.layers.size(); ++i) {
        EXPECT_EQ(a.model.mlp.layers[i].weights, b.model.mlp.layers[i].weights);
        EXPECT_EQ(a.model.mlp.layers[i].bias, b.model.mlp.layers[i].bias);
    }
}

TEST(Persistence, ModelRoundTripPreservesLoss) {
    Rng rng(17);
    const auto t = synthetic::random_latent_tree(6, 2, rng);
    const auto data = noise_data(t, 30, 3, rng);
    TrainConfig cfg;
    cfg.hidden = {7, 5};
    cfg.epochs = 2;
    cfg.batch_size = 10;
    const auto m = sgd_train(data, t, cfg).model;
    const auto text = model_to_json(m).dump();
    const auto back = model_from_json(nlohmann::json::parse(text));
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const Vector x = data.features.row(i).transpose();
        const auto y = label_row(data.labels, i);
        EXPECT_NEAR(marginal_nll_loss(back, x, y), marginal_nll_loss(m, x, y), 1e-12);
    }
    EXPECT_EQ(flatten_parameters(back), flatten_parameters(m));
    EXPECT_EQ(model_to_json(back).dump(), text);
}

TEST(Persistence, BaselineRoundTripAndRejects) {
    Rng rng(18);
    LatentTree t = synthetic::random_latent_tree(3, 0, rng);
    const auto data = noise_data(t, 20, 2, rng);
    TrainConfig cfg;
    cfg.hidden = {4};
    cfg.epochs = 1;
    const auto b = independent_baseline_train(data, cfg).model;
    const auto back = baseline_from_json(nlohmann::json::parse(baseline_to_json(b).dump()));
    EXPECT_EQ(baseline_probabilities(back, Vector::Ones(2)), baseline_probabilities(b, Vector::Ones(2)));
    auto bad = baseline_to_json(b);
    bad["kind"] = "cltm";
    EXPECT_THROW(baseline_from_json(bad), InvalidInput);
    EXPECT_THROW(config_from_json(nlohmann::json{{"bogus", 1}}), InvalidInput);
}
