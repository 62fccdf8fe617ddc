#pragma once

// Feed-forward network producing one node potential per tree node, trained
// together with input-independent edge potentials by the marginal negative
// log-likelihood  -log P(y | x) = log Z(x) - log Z(x, y).

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "cltm/common.hpp"
#include "cltm/dataset.hpp"
#include "cltm/latent_tree.hpp"
#include "cltm/tree_crf.hpp"

namespace cltm::nn {

struct Layer {
    Matrix weights;  // out x in
    Vector bias;
};

struct MlpParameters {
    std::vector<Layer> layers;
    double dropout_rate = 0.0;

    int depth() const { return static_cast<int>(layers.size()); }
    Eigen::Index input_dim() const { return layers.front().weights.cols(); }
    Eigen::Index output_dim() const { return layers.back().weights.rows(); }

    void validate() const {
        if (layers.empty() || layers.size() > 3) throw InvalidInput("mlp: layer count must be 1, 2 or 3");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw InvalidInput("mlp: dropout rate must be in [0, 1)");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.bias.size() != l.weights.rows()) throw InvalidInput("mlp: bias size does not match layer width");
            if (i > 0 && l.weights.cols() != layers[i - 1].weights.rows()) {
                throw InvalidInput("mlp: layer " + std::to_string(i) + " input width does not chain");
            }
            if (!l.weights.allFinite() || !l.bias.allFinite()) throw InvalidInput("mlp: non-finite parameters");
        }
    }
};

/// Per-dimension affine standardization; near-constant dimensions get unit scale.
struct Standardizer {
    Vector mean;
    Vector scale;

    static Standardizer fit(const Matrix& x) {
        Standardizer s;
        s.mean = x.colwise().mean().transpose();
        s.scale.resize(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double var = (x.col(j).array() - s.mean(j)).square().mean();
            const double sd = std::sqrt(var);
            s.scale(j) = sd > 1e-12 ? sd : 1.0;
        }
        return s;
    }

    static Standardizer identity(Eigen::Index d) { return {Vector::Zero(d), Vector::Ones(d)}; }

    Vector apply(const Eigen::Ref<const Vector>& x) const {
        if (x.size() != mean.size()) {
            throw InvalidInput("standardizer: feature length " + std::to_string(x.size()) + " != " +
                               std::to_string(mean.size()));
        }
        return (x - mean).cwiseQuotient(scale);
    }
};

struct TrainConfig {
    std::vector<int> hidden{256, 128};  // hidden widths; depth = hidden.size() + 1
    int batch_size = 250;
    double learning_rate = 0.05;
    double lr_decay = 0.0;
    int epochs = 20;
    double dropout_rate = 0.5;
    double edge_l2 = 1e-4;
    bool zero_init = false;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const {
        if (hidden.size() > 2) throw InvalidInput("train config: at most two hidden layers");
        for (int h : hidden)
            if (h < 1) throw InvalidInput("train config: hidden widths must be positive");
        if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw InvalidInput("train config: learning_rate must be > 0");
        if (lr_decay < 0.0) throw InvalidInput("train config: lr_decay must be >= 0");
        if (epochs < 0) throw InvalidInput("train config: epochs must be >= 0");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw InvalidInput("train config: dropout_rate must be in [0, 1)");
        if (edge_l2 < 0.0) throw InvalidInput("train config: edge_l2 must be >= 0");
    }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
    return {{"hidden", c.hidden},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
            {"lr_decay", c.lr_decay},     {"epochs", c.epochs},         {"dropout_rate", c.dropout_rate},
            {"edge_l2", c.edge_l2},       {"zero_init", c.zero_init},   {"seed", c.seed}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "hidden") c.hidden = v.get<std::vector<int>>();
            else if (key == "batch_size") c.batch_size = v.get<int>();
            else if (key == "learning_rate") c.learning_rate = v.get<double>();
            else if (key == "lr_decay") c.lr_decay = v.get<double>();
            else if (key == "epochs") c.epochs = v.get<int>();
            else if (key == "dropout_rate") c.dropout_rate = v.get<double>();
            else if (key == "edge_l2") c.edge_l2 = v.get<double>();
            else if (key == "zero_init") c.zero_init = v.get<bool>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "threads") c.threads = v.get<int>();
            else throw InvalidInput("train config: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Glorot-uniform weights (or all zeros), zero biases.
inline MlpParameters init_mlp(Eigen::Index input_dim, const std::vector<int>& hidden, Eigen::Index output_dim,
                              double dropout_rate, Rng& rng, bool zero = false) {
    if (input_dim < 1 || output_dim < 1) throw InvalidInput("init_mlp: dimensions must be positive");
    MlpParameters p;
    p.dropout_rate = dropout_rate;
    std::vector<Eigen::Index> dims{input_dim};
    for (int h : hidden) dims.push_back(h);
    dims.push_back(output_dim);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        Layer l;
        l.weights = Matrix::Zero(dims[i + 1], dims[i]);
        l.bias = Vector::Zero(dims[i + 1]);
        if (!zero) {
            const double a = std::sqrt(6.0 / static_cast<double>(dims[i] + dims[i + 1]));
            for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
                for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = a * (2.0 * uniform01(rng) - 1.0);
        }
        p.layers.push_back(std::move(l));
    }
    p.validate();
    return p;
}

enum class Mode { Train, Eval };

struct ForwardCache {
    std::vector<Vector> input;  // input to each layer
    std::vector<Vector> pre;    // pre-activation of each layer
    std::vector<Vector> mask;   // per hidden layer: 0 or 1/(1-p); empty when no dropout
};

/// Affine layers with ReLU between them and a linear output. Train mode with a
/// nonzero dropout rate draws an inverted-dropout mask per hidden layer from `rng`.
inline Vector mlp_forward(const MlpParameters& p, const Eigen::Ref<const Vector>& x, Mode mode = Mode::Eval,
                          Rng* rng = nullptr, ForwardCache* cache = nullptr) {
    if (x.size() != p.input_dim()) {
        throw InvalidInput("mlp_forward: input length " + std::to_string(x.size()) + " != " +
                           std::to_string(p.input_dim()));
    }
    const bool drop = mode == Mode::Train && p.dropout_rate > 0.0;
    if (drop && rng == nullptr) throw InvalidInput("mlp_forward: train mode with dropout needs an rng");
    if (cache) *cache = {};
    Vector a = x;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        Vector z = p.layers[i].weights * a + p.layers[i].bias;
        if (cache) {
            cache->input.push_back(a);
            cache->pre.push_back(z);
        }
        if (i + 1 == p.layers.size()) return z;
        a = z.cwiseMax(0.0);
        if (drop) {
            Vector m(a.size());
            const double keep = 1.0 / (1.0 - p.dropout_rate);
            for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = uniform01(*rng) < p.dropout_rate ? 0.0 : keep;
            a = a.cwiseProduct(m);
            if (cache) cache->mask.push_back(std::move(m));
        } else if (cache) {
            cache->mask.emplace_back();
        }
    }
    return a;
}

struct MlpGradient {
    std::vector<Matrix> weights;
    std::vector<Vector> bias;

    static MlpGradient zeros_like(const MlpParameters& p) {
        MlpGradient g;
        for (const auto& l : p.layers) {
            g.weights.push_back(Matrix::Zero(l.weights.rows(), l.weights.cols()));
            g.bias.push_back(Vector::Zero(l.bias.size()));
        }
        return g;
    }

    MlpGradient& operator+=(const MlpGradient& o) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            weights[i] += o.weights[i];
            bias[i] += o.bias[i];
        }
        return *this;
    }

    MlpGradient& operator*=(double s) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            weights[i] *= s;
            bias[i] *= s;
        }
        return *this;
    }
};

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
inline void mlp_backward(const MlpParameters& p, const ForwardCache& cache, Vector g, MlpGradient& grad) {
    for (std::size_t i = p.layers.size(); i-- > 0;) {
        grad.weights[i].noalias() += g * cache.input[i].transpose();
        grad.bias[i] += g;
        if (i == 0) break;
        Vector prev = p.layers[i].weights.transpose() * g;
        if (cache.mask[i - 1].size() > 0) prev = prev.cwiseProduct(cache.mask[i - 1]);
        for (Eigen::Index k = 0; k < prev.size(); ++k)
            if (cache.pre[i - 1](k) <= 0.0) prev(k) = 0.0;
        g = std::move(prev);
    }
}

inline void apply_update(MlpParameters& p, const MlpGradient& g, double lr) {
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        p.layers[i].weights -= lr * g.weights[i];
        p.layers[i].bias -= lr * g.bias[i];
    }
}

// ---------------------------------------------------------------------------
// CLTM model

struct CltmModel {
    LatentTree tree;
    MlpParameters mlp;
    Vector edge_potentials;  // one per tree edge, canonical order
    Standardizer standardizer;
    TrainConfig config;

    void validate() const {
        tree.validate();
        mlp.validate();
        if (mlp.output_dim() != tree.node_count()) throw InvalidInput("cltm model: output width != node count");
        if (edge_potentials.size() != static_cast<Eigen::Index>(tree.edges.size())) {
            throw InvalidInput("cltm model: one edge potential per tree edge required");
        }
        if (standardizer.mean.size() != mlp.input_dim() || standardizer.scale.size() != mlp.input_dim()) {
            throw InvalidInput("cltm model: standardizer width != input width");
        }
    }
};

/// Potentials for a raw feature vector (eval mode).
inline crf::Potentials potentials(const CltmModel& m, const Eigen::Ref<const Vector>& x) {
    return {mlp_forward(m.mlp, m.standardizer.apply(x)), m.edge_potentials};
}

/// Clamp vector over all tree nodes: observed nodes fixed to y, latent unset.
inline crf::Assignment observed_clamp(const LatentTree& tree, const std::vector<int>& y) {
    if (static_cast<int>(y.size()) != tree.observed_count()) {
        throw InvalidInput("label vector length " + std::to_string(y.size()) + " != observed count " +
                           std::to_string(tree.observed_count()));
    }
    crf::Assignment clamp(static_cast<std::size_t>(tree.node_count()), crf::kUnset);
    for (std::size_t k = 0; k < y.size(); ++k) {
        if (y[k] != 0 && y[k] != 1) throw InvalidInput("labels must be 0 or 1");
        clamp[k] = y[k];
    }
    return clamp;
}

inline std::vector<int> label_row(const LabelMatrix& labels, Eigen::Index i) {
    std::vector<int> y(static_cast<std::size_t>(labels.cols()));
    for (Eigen::Index k = 0; k < labels.cols(); ++k) y[static_cast<std::size_t>(k)] = labels(i, k);
    return y;
}

/// -log P(y | x) = log Z(x) - log Z(x, y_observed), in eval mode.
inline double marginal_nll_loss(const CltmModel& m, const Eigen::Ref<const Vector>& x, const std::vector<int>& y) {
    const crf::TreeTopology topo(m.tree);
    const auto pot = potentials(m, x);
    return crf::log_partition(topo, pot) - crf::log_partition(topo, pot, observed_clamp(m.tree, y));
}

struct PotentialGradient {
    double loss = 0.0;
    Vector node;  // dL/dphi_k = E[z_k | x, y] - E[z_k | x]
    Vector edge;  // dL/dphi_kt = E[z_k z_t | x, y] - E[z_k z_t | x]
};

inline PotentialGradient potential_gradient(const crf::TreeTopology& topo, const crf::Potentials& pot,
                                            const crf::Assignment& clamp) {
    const auto fr = crf::marginals(topo, pot);
    const auto cl = crf::marginals(topo, pot, clamp);
    PotentialGradient g;
    g.loss = fr.log_partition - cl.log_partition;
    g.node = cl.node_marginals - fr.node_marginals;
    g.edge.resize(static_cast<Eigen::Index>(fr.edge_marginals.size()));
    for (std::size_t e = 0; e < fr.edge_marginals.size(); ++e) {
        g.edge(static_cast<Eigen::Index>(e)) = cl.edge_marginals[e](1, 1) - fr.edge_marginals[e](1, 1);
    }
    return g;
}

struct ModelGradient {
    MlpGradient mlp;
    Vector edge;
    double loss = 0.0;  // batch mean NLL plus the edge penalty
};

/// Seed for the dropout mask of one sample at one optimizer step.
inline std::uint64_t dropout_seed(std::uint64_t master, std::uint64_t step, std::uint64_t sample) {
    return derive_seed(derive_seed(derive_seed(master, "dropout"), step), sample);
}

/// Batch-mean gradient of the NLL plus 0.5 * edge_l2 * |theta|^2. With
/// `train` set and a nonzero dropout rate, each sample's mask is seeded from
/// (mask_seed, step, row). Per-sample work may run on several threads and is
/// reduced in batch order.
inline ModelGradient loss_gradient(const CltmModel& m, const LabeledDataset& data, const std::vector<Eigen::Index>& rows,
                                   double edge_l2, bool train = false, std::uint64_t mask_seed = 0,
                                   std::uint64_t step = 0, int threads = 1) {
    if (rows.empty()) throw InvalidInput("loss_gradient: empty batch");
    const crf::TreeTopology topo(m.tree);
    struct Item {
        MlpGradient g;
        PotentialGradient pg;
    };
    std::vector<Item> items(rows.size());
    parallel_for(rows.size(), threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Eigen::Index r = rows[i];
            Rng rng(dropout_seed(mask_seed, step, static_cast<std::uint64_t>(r)));
            ForwardCache cache;
            const Vector x = m.standardizer.apply(data.features.row(r).transpose());
            crf::Potentials pot{mlp_forward(m.mlp, x, train ? Mode::Train : Mode::Eval, &rng, &cache),
                                m.edge_potentials};
            items[i].pg = potential_gradient(topo, pot, observed_clamp(m.tree, label_row(data.labels, r)));
            items[i].g = MlpGradient::zeros_like(m.mlp);
            mlp_backward(m.mlp, cache, items[i].pg.node, items[i].g);
        }
    });
    ModelGradient out;
    out.mlp = MlpGradient::zeros_like(m.mlp);
    out.edge = Vector::Zero(m.edge_potentials.size());
    for (const auto& it : items) {
        out.mlp += it.g;
        out.edge += it.pg.edge;
        out.loss += it.pg.loss;
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    out.mlp *= inv;
    out.edge *= inv;
    out.loss *= inv;
    out.edge += edge_l2 * m.edge_potentials;
    out.loss += 0.5 * edge_l2 * m.edge_potentials.squaredNorm();
    return out;
}

/// Mean -log P(y | x) over the given rows (all rows when empty), eval mode.
inline double mean_nll(const CltmModel& m, const LabeledDataset& data, std::vector<Eigen::Index> rows = {}) {
    if (rows.empty())
        for (Eigen::Index i = 0; i < data.size(); ++i) rows.push_back(i);
    const crf::TreeTopology topo(m.tree);
    double s = 0.0;
    for (auto r : rows) {
        const auto pot = potentials(m, data.features.row(r).transpose());
        s += crf::log_partition(topo, pot) -
             crf::log_partition(topo, pot, observed_clamp(m.tree, label_row(data.labels, r)));
    }
    return s / static_cast<double>(rows.size());
}

// Flat parameter view: layer weights (row-major), layer biases, then edges.
inline Vector flatten_parameters(const CltmModel& m) {
    std::vector<double> v;
    for (const auto& l : m.mlp.layers) {
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weights.cols(); ++c) v.push_back(l.weights(r, c));
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) v.push_back(l.bias(r));
    }
    for (Eigen::Index e = 0; e < m.edge_potentials.size(); ++e) v.push_back(m.edge_potentials(e));
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void assign_parameters(CltmModel& m, const Vector& v) {
    Eigen::Index i = 0;
    for (auto& l : m.mlp.layers) {
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = v(i++);
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = v(i++);
    }
    for (Eigen::Index e = 0; e < m.edge_potentials.size(); ++e) m.edge_potentials(e) = v(i++);
    if (i != v.size()) throw InvalidInput("assign_parameters: vector length does not match model");
}

inline Vector flatten_gradient(const ModelGradient& g) {
    std::vector<double> v;
    for (std::size_t k = 0; k < g.mlp.weights.size(); ++k) {
        const auto& w = g.mlp.weights[k];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) v.push_back(w(r, c));
        for (Eigen::Index r = 0; r < g.mlp.bias[k].size(); ++r) v.push_back(g.mlp.bias[k](r));
    }
    for (Eigen::Index e = 0; e < g.edge.size(); ++e) v.push_back(g.edge(e));
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// ---------------------------------------------------------------------------
// Training

inline void check_labels_match(const LabeledDataset& data, const LatentTree& tree) {
    data.validate();
    if (data.label_count() != tree.observed_count()) {
        throw InvalidInput("dataset has " + std::to_string(data.label_count()) + " labels but tree has " +
                           std::to_string(tree.observed_count()) + " observed nodes");
    }
    if (!data.label_names.empty() && data.label_names != tree.observed) {
        throw InvalidInput("dataset label names do not match tree observed nodes");
    }
}

inline CltmModel init_model(const LabeledDataset& data, const LatentTree& tree, const TrainConfig& cfg) {
    cfg.validate();
    check_labels_match(data, tree);
    Rng rng(derive_seed(cfg.seed, "init"));
    CltmModel m;
    m.tree = tree;
    m.mlp = init_mlp(data.dim(), cfg.hidden, tree.node_count(), cfg.dropout_rate, rng, cfg.zero_init);
    m.edge_potentials = Vector::Zero(static_cast<Eigen::Index>(tree.edges.size()));
    m.standardizer = Standardizer::fit(data.features);
    m.config = cfg;
    return m;
}

struct TrainResult {
    CltmModel model;
    std::vector<double> loss_trace;  // per-epoch mean training objective
};

/// Epoch-based mini-batch SGD. lr_e = lr / (1 + lr_decay * e).
inline TrainResult sgd_train(const LabeledDataset& data, const LatentTree& tree, const TrainConfig& cfg) {
    TrainResult res{init_model(data, tree, cfg), {}};
    CltmModel& m = res.model;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    const std::uint64_t mask_seed = derive_seed(cfg.seed, "mask");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_in_place(order, shuffle_rng);
        const double lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<Eigen::Index> rows(order.begin() + static_cast<std::ptrdiff_t>(b),
                                                 order.begin() + static_cast<std::ptrdiff_t>(e));
            const auto g = loss_gradient(m, data, rows, cfg.edge_l2, true, mask_seed, step++, cfg.threads);
            if (!std::isfinite(g.loss) || !g.edge.allFinite()) {
                throw TrainingError("training diverged: non-finite loss", epoch);
            }
            apply_update(m.mlp, g.mlp, lr);
            m.edge_potentials -= lr * g.edge;
            total += g.loss;
            ++batches;
        }
        const double mean = total / static_cast<double>(batches);
        if (!std::isfinite(mean)) throw TrainingError("training diverged: non-finite loss", epoch);
        for (const auto& l : m.mlp.layers)
            if (!l.weights.allFinite() || !l.bias.allFinite())
                throw TrainingError("training diverged: non-finite parameters", epoch);
        res.loss_trace.push_back(mean);
    }
    return res;
}

/// Unclamped inference for a raw feature vector.
inline crf::InferenceResult predict(const CltmModel& m, const Eigen::Ref<const Vector>& x) {
    const auto pot = potentials(m, x);
    auto res = crf::marginals(m.tree, pot);
    res.map = crf::map_config(m.tree, pot);
    return res;
}

// ---------------------------------------------------------------------------
// Independent per-label baseline on the same trunk

struct BaselineModel {
    MlpParameters mlp;  // output width = label count; P(y_k = 1) = sigmoid(out_k)
    Standardizer standardizer;
    std::vector<std::string> label_names;
    TrainConfig config;
};

inline double sigmoid(double s) {
    return s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

inline Vector baseline_probabilities(const BaselineModel& b, const Eigen::Ref<const Vector>& x) {
    return mlp_forward(b.mlp, b.standardizer.apply(x)).unaryExpr([](double s) { return sigmoid(s); });
}

/// Summed per-label cross-entropy, i.e. -log of the product-of-sigmoids likelihood.
inline double baseline_nll(const BaselineModel& b, const Eigen::Ref<const Vector>& x, const std::vector<int>& y) {
    const Vector s = mlp_forward(b.mlp, b.standardizer.apply(x));
    double l = 0.0;
    for (Eigen::Index k = 0; k < s.size(); ++k) {
        // log(1 + exp(-s)) for y = 1, log(1 + exp(s)) for y = 0
        const double m = y[static_cast<std::size_t>(k)] ? -s(k) : s(k);
        l += m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    }
    return l;
}

inline double baseline_mean_nll(const BaselineModel& b, const LabeledDataset& data,
                                std::vector<Eigen::Index> rows = {}) {
    if (rows.empty())
        for (Eigen::Index i = 0; i < data.size(); ++i) rows.push_back(i);
    double s = 0.0;
    for (auto r : rows) s += baseline_nll(b, data.features.row(r).transpose(), label_row(data.labels, r));
    return s / static_cast<double>(rows.size());
}

struct BaselineResult {
    BaselineModel model;
    std::vector<double> loss_trace;
};

inline BaselineResult independent_baseline_train(const LabeledDataset& data, const TrainConfig& cfg) {
    cfg.validate();
    data.validate();
    Rng init_rng(derive_seed(cfg.seed, "baseline-init"));
    BaselineResult res;
    BaselineModel& b = res.model;
    b.mlp = init_mlp(data.dim(), cfg.hidden, data.label_count(), cfg.dropout_rate, init_rng, cfg.zero_init);
    b.standardizer = Standardizer::fit(data.features);
    b.label_names = data.label_names;
    b.config = cfg;

    Rng shuffle_rng(derive_seed(cfg.seed, "baseline-shuffle"));
    const std::uint64_t mask_seed = derive_seed(cfg.seed, "baseline-mask");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_in_place(order, shuffle_rng);
        const double lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
            std::vector<MlpGradient> grads(e - s);
            std::vector<double> losses(e - s, 0.0);
            parallel_for(e - s, cfg.threads, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) {
                    const Eigen::Index r = order[s + i];
                    Rng rng(dropout_seed(mask_seed, step, static_cast<std::uint64_t>(r)));
                    ForwardCache cache;
                    const Vector out = mlp_forward(b.mlp, b.standardizer.apply(data.features.row(r).transpose()),
                                                   Mode::Train, &rng, &cache);
                    Vector g(out.size());
                    for (Eigen::Index k = 0; k < out.size(); ++k) {
                        const int y = data.labels(r, k);
                        g(k) = sigmoid(out(k)) - y;
                        const double m = y ? -out(k) : out(k);
                        losses[i] += m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
                    }
                    grads[i] = MlpGradient::zeros_like(b.mlp);
                    mlp_backward(b.mlp, cache, g, grads[i]);
                }
            });
            ++step;
            MlpGradient sum = MlpGradient::zeros_like(b.mlp);
            double loss = 0.0;
            for (std::size_t i = 0; i < grads.size(); ++i) {
                sum += grads[i];
                loss += losses[i];
            }
            const double inv = 1.0 / static_cast<double>(grads.size());
            sum *= inv;
            loss *= inv;
            if (!std::isfinite(loss)) throw TrainingError("baseline training diverged: non-finite loss", epoch);
            apply_update(b.mlp, sum, lr);
            total += loss;
            ++batches;
        }
        res.loss_trace.push_back(total / static_cast<double>(batches));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline nlohmann::json mlp_to_json(const MlpParameters& p) {
    auto layers = nlohmann::json::array();
    for (const auto& l : p.layers) {
        std::vector<double> w;
        w.reserve(static_cast<std::size_t>(l.weights.size()));
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
        layers.push_back({{"rows", l.weights.rows()},
                          {"cols", l.weights.cols()},
                          {"weights", w},
                          {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
    }
    return {{"dropout_rate", p.dropout_rate}, {"layers", layers}};
}

inline Vector to_vector(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline MlpParameters mlp_from_json(const nlohmann::json& j) {
    MlpParameters p;
    p.dropout_rate = j.at("dropout_rate").get<double>();
    for (const auto& lj : j.at("layers")) {
        const auto rows = lj.at("rows").get<Eigen::Index>();
        const auto cols = lj.at("cols").get<Eigen::Index>();
        const auto w = lj.at("weights").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(w.size()) != rows * cols) throw InvalidInput("model json: weight count mismatch");
        Layer l;
        l.weights.resize(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) l.weights(r, c) = w[static_cast<std::size_t>(r * cols + c)];
        l.bias = to_vector(lj.at("bias"));
        p.layers.push_back(std::move(l));
    }
    p.validate();
    return p;
}

inline nlohmann::json standardizer_to_json(const Standardizer& s) {
    return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
            {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
    return {to_vector(j.at("mean")), to_vector(j.at("scale"))};
}

}  // namespace detail

inline nlohmann::json model_to_json(const CltmModel& m) {
    auto edges = nlohmann::json::array();
    for (std::size_t e = 0; e < m.tree.edges.size(); ++e) {
        edges.push_back({{"edge", {m.tree.name(m.tree.edges[e].first), m.tree.name(m.tree.edges[e].second)}},
                         {"value", m.edge_potentials(static_cast<Eigen::Index>(e))}});
    }
    return {{"kind", "cltm"},
            {"tree", tree_to_json(m.tree)},
            {"mlp", detail::mlp_to_json(m.mlp)},
            {"edge_potentials", edges},
            {"standardizer", detail::standardizer_to_json(m.standardizer)},
            {"config", config_to_json(m.config)}};
}

inline CltmModel model_from_json(const nlohmann::json& j) {
    CltmModel m;
    try {
        if (j.at("kind").get<std::string>() != "cltm") throw InvalidInput("model json: not a cltm model");
        m.tree = tree_from_json(j.at("tree"));
        m.mlp = detail::mlp_from_json(j.at("mlp"));
        m.edge_potentials = Vector::Zero(static_cast<Eigen::Index>(m.tree.edges.size()));
        std::vector<char> seen(m.tree.edges.size(), 0);
        for (const auto& ej : j.at("edge_potentials")) {
            const int a = m.tree.index_of(ej.at("edge").at(0).get<std::string>());
            const int b = m.tree.index_of(ej.at("edge").at(1).get<std::string>());
            const int e = m.tree.edge_index(a, b);
            if (e < 0) throw InvalidInput("model json: edge potential for a non-edge");
            seen[static_cast<std::size_t>(e)] = 1;
            m.edge_potentials(e) = ej.at("value").get<double>();
        }
        for (char s : seen)
            if (!s) throw InvalidInput("model json: missing edge potential");
        m.standardizer = detail::standardizer_from_json(j.at("standardizer"));
        m.config = config_from_json(j.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("model json: ") + e.what());
    }
    m.validate();
    return m;
}

inline nlohmann::json baseline_to_json(const BaselineModel& b) {
    return {{"kind", "independent"},
            {"labels", b.label_names},
            {"mlp", detail::mlp_to_json(b.mlp)},
            {"standardizer", detail::standardizer_to_json(b.standardizer)},
            {"config", config_to_json(b.config)}};
}

inline BaselineModel baseline_from_json(const nlohmann::json& j) {
    BaselineModel b;
    try {
        if (j.at("kind").get<std::string>() != "independent") throw InvalidInput("baseline json: wrong kind");
        b.label_names = j.at("labels").get<std::vector<std::string>>();
        b.mlp = detail::mlp_from_json(j.at("mlp"));
        b.standardizer = detail::standardizer_from_json(j.at("standardizer"));
        b.config = config_from_json(j.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("baseline json: ") + e.what());
    }
    if (b.mlp.output_dim() != static_cast<Eigen::Index>(b.label_names.size())) {
        throw InvalidInput("baseline json: output width != label count");
    }
    return b;
}

}  // namespace cltm::nn
