// cltm: command-line pipeline for conditional latent tree models.
//
//   cltm synth     --out-dir D
//   cltm distances --data D/manifest.json --out-dir D
//   cltm structure --distances D/distances.csv --out-dir D
//   cltm train     --data D/manifest.json --tree D/tree.json --out-dir D
//   cltm infer     --data D/manifest.json --model D/model.json [--baseline D/baseline.json] --out-dir D
//   cltm eval      --data D/manifest.json --marginals D/marginals.csv --map D/map.csv
//                  [--baseline-probs D/baseline_probs.csv] --out-dir D
//   cltm scene     --data D/manifest.json --model D/model.json [--baseline D/baseline.json] --out-dir D
//
// Every command accepts --config, --seed, --out-dir and --threads, prints one
// JSON summary line on success and an error JSON on stderr on failure.

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <map>
#include <set>

#include "cltm/eval.hpp"
#include "cltm/io.hpp"
#include "cltm/structure_learning.hpp"

namespace fs = std::filesystem;
using cltm::io::json;
using namespace cltm;

namespace {

struct Common {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out_dir = ".";
};

struct Inputs {
    std::string data, distances, tree, model, baseline, marginals, map, baseline_probs;
    std::string split = "validation";
    int top_k = 10;
};

io::RunConfig resolve_config(const Common& c) {
    auto cfg = io::load_config(c.config ? std::optional<fs::path>(*c.config) : std::nullopt);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) {
        if (*c.threads < 1) throw InvalidInput("--threads must be >= 1");
        cfg.threads = *c.threads;
    }
    cfg.distances.seed = derive_seed(cfg.seed, "distances");
    cfg.distances.threads = cfg.threads;
    cfg.train.seed = derive_seed(cfg.seed, "train");
    cfg.train.threads = cfg.threads;
    return cfg;
}

/// Configuration echo for artifacts; thread count does not affect results.
json provenance(const io::RunConfig& cfg) {
    auto j = io::config_to_json(cfg);
    j.erase("threads");
    return j;
}

std::vector<int> to_int_rows(const std::vector<Eigen::Index>& rows) {
    return {rows.begin(), rows.end()};
}

std::vector<Eigen::Index> select_rows(const io::Ingested& in, const std::string& split) {
    std::vector<Eigen::Index> all;
    for (Eigen::Index i = 0; i < in.data.size(); ++i) all.push_back(i);
    if (split == "all") return all;
    if (split == "train") return io::split_rows(in, false);
    if (split == "validation") {
        auto v = io::split_rows(in, true);
        return v.empty() ? all : v;
    }
    throw InvalidInput("unknown split '" + split + "' (expected train, validation or all)");
}

/// Reorders label columns to `names`; every name must be present.
LabeledDataset align_labels(const LabeledDataset& d, const std::vector<std::string>& names) {
    std::map<std::string, Eigen::Index> col;
    for (std::size_t k = 0; k < d.label_names.size(); ++k) col[d.label_names[k]] = static_cast<Eigen::Index>(k);
    LabeledDataset out;
    out.features = d.features;
    out.scenes = d.scenes;
    out.label_names = names;
    out.labels.resize(d.size(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto it = col.find(names[k]);
        if (it == col.end()) throw InvalidInput("dataset has no label named '" + names[k] + "'");
        out.labels.col(static_cast<Eigen::Index>(k)) = d.labels.col(it->second);
    }
    return out;
}

/// Headered CSV: first row names, remaining rows numeric.
std::string table_csv(const std::vector<std::string>& header, const Matrix& m) {
    std::string s;
    for (std::size_t k = 0; k < header.size(); ++k) s += (k ? "," : "") + header[k];
    s += '\n';
    return s + io::matrix_to_csv(m);
}

struct Table {
    std::vector<std::string> header;
    Matrix values;
};

Table read_table_csv(const fs::path& p) {
    const auto rows = io::parse_csv(io::read_text(p));
    if (rows.empty()) throw InvalidInput(p.filename().string() + ": empty table");
    Table t;
    t.header = rows[0];
    t.values.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(t.header.size()));
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != t.header.size()) {
            throw InvalidInput(p.filename().string() + " row " + std::to_string(r) + ": column count differs from header");
        }
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            t.values(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) =
                io::parse_double(rows[r][c], io::cell_ref(p, r, c));
        }
    }
    return t;
}

/// Columns of `t` named by `names`, in that order.
Matrix pick_columns(const Table& t, const std::vector<std::string>& names, const fs::path& p) {
    Matrix out(t.values.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto it = std::find(t.header.begin(), t.header.end(), names[k]);
        if (it == t.header.end()) throw InvalidInput(p.filename().string() + ": no column '" + names[k] + "'");
        out.col(static_cast<Eigen::Index>(k)) = t.values.col(it - t.header.begin());
    }
    return out;
}

json counts_json(const eval::Counts& c) { return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}}; }

json metrics_json(const eval::MetricsReport& r, const std::vector<std::string>& names) {
    auto per = json::array();
    for (std::size_t k = 0; k < r.per_label.size(); ++k) {
        const auto& m = r.per_label[k];
        per.push_back({{"label", names[k]},
                       {"precision", m.precision},
                       {"recall", m.recall},
                       {"f", m.f},
                       {"counts", counts_json(m.counts)},
                       {"no_positives", m.no_positives}});
    }
    return {{"micro", {{"precision", r.micro_precision}, {"recall", r.micro_recall}, {"f", r.micro_f},
                       {"counts", counts_json(r.micro_counts)}}},
            {"macro", {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f", r.macro_f}}},
            {"per_label", per}};
}

std::string pr_csv(const eval::PrCurve& c, const std::vector<std::string>& names) {
    std::string s = "label,threshold,precision,recall\n";
    auto emit = [&](const std::string& label, const std::vector<eval::PrPoint>& pts) {
        for (const auto& p : pts) {
            s += label + "," + io::format_double(p.threshold) + "," + io::format_double(p.precision) + "," +
                 io::format_double(p.recall) + "\n";
        }
    };
    for (std::size_t k = 0; k < c.per_label.size(); ++k) emit(names[k], c.per_label[k]);
    emit("micro", c.micro);
    return s;
}

LabelMatrix to_labels(const Matrix& m, const fs::path& p) {
    LabelMatrix out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index k = 0; k < m.cols(); ++k) {
            if (m(i, k) != 0.0 && m(i, k) != 1.0) throw InvalidInput(io::cell_ref(p, static_cast<std::size_t>(i + 1), static_cast<std::size_t>(k)) + ": MAP value must be 0 or 1");
            out(i, k) = m(i, k) == 1.0;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the summary JSON.

json cmd_synth(const io::RunConfig& cfg, const fs::path& out) {
    Rng rng(derive_seed(cfg.seed, "synth-model"));
    const auto truth = synthetic::random_ground_truth(cfg.synth.recipe, rng);
    const auto s = synthetic::sample_dataset(truth, cfg.synth.n, derive_seed(cfg.seed, "synth-sample"));

    std::vector<Eigen::Index> order(static_cast<std::size_t>(cfg.synth.n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    Rng split_rng(derive_seed(cfg.seed, "split"));
    shuffle_in_place(order, split_rng);
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.synth.train_fraction * cfg.synth.n));
    std::vector<Eigen::Index> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<Eigen::Index> validation(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train.begin(), train.end());
    std::sort(validation.begin(), validation.end());
    io::write_dataset(out, s.data, train, validation, cfg.synth.binary_features);

    auto clusters = json::array();
    for (int c = 0; c < truth.clusters(); ++c) {
        const auto& p = truth.cluster_potentials[static_cast<std::size_t>(c)];
        clusters.push_back({{"center", std::vector<double>(truth.centers.row(c).data(),
                                                           truth.centers.row(c).data() + truth.centers.cols())},
                            {"node_potentials", std::vector<double>(p.node.data(), p.node.data() + p.node.size())},
                            {"edge_potentials", std::vector<double>(p.edge.data(), p.edge.data() + p.edge.size())}});
    }
    auto hidden = json::array();
    for (Eigen::Index i = 0; i < s.hidden.rows(); ++i) {
        hidden.push_back(std::vector<int>(s.hidden.row(i).data(), s.hidden.row(i).data() + s.hidden.cols()));
    }
    io::write_json(out / "truth.json", {{"tree", tree_to_json(truth.tree)},
                                        {"noise_scale", truth.noise_scale},
                                        {"clusters", clusters},
                                        {"cluster", s.cluster},
                                        {"hidden_names", truth.tree.latent},
                                        {"hidden", hidden},
                                        {"config", provenance(cfg)}});
    return {{"n", cfg.synth.n},
            {"train", train.size()},
            {"validation", validation.size()},
            {"observed", truth.tree.observed_count()},
            {"latent", truth.tree.latent_count()},
            {"outputs", {"manifest.json", "labels.csv", "scenes.csv", "truth.json"}}};
}

json cmd_distances(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto data = io::ingest(in.data);
    const auto train = data.data.subset(to_int_rows(io::split_rows(data, false)));
    const auto res = kernel::cond_distance_matrix(train, cfg.distances);
    io::write_distances(out / "distances.csv", res.distances,
                        {{"gamma", res.gamma},
                         {"dropped_labels", res.dropped_labels},
                         {"queries", res.queries.size()},
                         {"skipped_pair_queries", res.skipped_pair_queries},
                         {"config", provenance(cfg)}});
    return {{"labels", res.distances.names.size()},
            {"dropped_labels", res.dropped_labels},
            {"gamma", res.gamma},
            {"queries", res.queries.size()},
            {"outputs", {"distances.csv", "distances.json"}}};
}

json cmd_structure(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto dm = io::read_distances(in.distances);
    const auto tree = structure::clrg(dm, cfg.structure);
    io::write_json(out / "tree.json", tree_to_json(tree));
    io::write_text(out / "tree.dot", tree_to_dot(tree));
    return {{"observed", tree.observed_count()},
            {"latent_count", tree.latent_count()},
            {"edges", tree.edges.size()},
            {"outputs", {"tree.json", "tree.dot"}}};
}

json cmd_train(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto data = io::ingest(in.data);
    const auto tree = tree_from_json(io::read_json(in.tree));
    const auto aligned = align_labels(data.data, tree.observed);
    const auto train = aligned.subset(to_int_rows(io::split_rows(data, false)));
    const auto res = nn::sgd_train(train, tree, cfg.train);
    const auto base = nn::independent_baseline_train(train, cfg.train);
    io::write_json(out / "model.json", nn::model_to_json(res.model));
    io::write_json(out / "baseline.json", nn::baseline_to_json(base.model));

    json summary{{"epochs", cfg.train.epochs},
                 {"outputs", {"model.json", "baseline.json", "train_log.json"}}};
    json log{{"cltm_loss", res.loss_trace}, {"baseline_loss", base.loss_trace}};
    const auto val_rows = io::split_rows(data, true);
    if (!val_rows.empty()) {
        const auto val = aligned.subset(to_int_rows(val_rows));
        const double nll = nn::mean_nll(res.model, val);
        const double bnll = nn::baseline_mean_nll(base.model, val);
        log["validation_nll"] = nll;
        log["baseline_validation_nll"] = bnll;
        summary["validation_nll"] = nll;
        summary["baseline_validation_nll"] = bnll;
    }
    log["config"] = provenance(cfg);
    io::write_json(out / "train_log.json", log);
    if (!res.loss_trace.empty()) summary["final_loss"] = res.loss_trace.back();
    return summary;
}

json cmd_infer(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto data = io::ingest(in.data);
    const auto model = nn::model_from_json(io::read_json(in.model));
    const auto rows = select_rows(data, in.split);
    const auto& tree = model.tree;
    const crf::TreeTopology topo(tree);
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    Matrix marg(n, tree.node_count()), map(n, tree.node_count()), phi(n, tree.node_count());
    parallel_for(rows.size(), cfg.threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) {
            const auto i = static_cast<Eigen::Index>(r);
            const auto pot = nn::potentials(model, data.data.features.row(rows[r]).transpose());
            marg.row(i) = crf::marginals(topo, pot).node_marginals.transpose();
            const auto z = crf::map_config(topo, pot);
            for (int v = 0; v < tree.node_count(); ++v) map(i, v) = z[static_cast<std::size_t>(v)];
            phi.row(i) = pot.node.transpose();
        }
    });
    std::vector<std::string> names = tree.observed;
    names.insert(names.end(), tree.latent.begin(), tree.latent.end());
    io::write_text(out / "marginals.csv", table_csv(names, marg));
    io::write_text(out / "map.csv", table_csv(names, map));

    json act = json::object();
    for (const auto& h : tree.latent) {
        std::vector<Eigen::Index> top;
        for (int r : crf::latent_activation_scores(tree, phi, h, static_cast<std::size_t>(in.top_k)))
            top.push_back(rows[static_cast<std::size_t>(r)]);
        act[h] = top;
    }
    io::write_json(out / "activations.json", {{"split", in.split}, {"top_k", in.top_k}, {"samples", act}});

    json outputs{"marginals.csv", "map.csv", "activations.json"};
    if (!in.baseline.empty()) {
        const auto base = nn::baseline_from_json(io::read_json(in.baseline));
        Matrix probs(n, static_cast<Eigen::Index>(base.label_names.size()));
        for (Eigen::Index i = 0; i < n; ++i) {
            probs.row(i) =
                nn::baseline_probabilities(base, data.data.features.row(rows[static_cast<std::size_t>(i)]).transpose())
                    .transpose();
        }
        io::write_text(out / "baseline_probs.csv", table_csv(base.label_names, probs));
        outputs.push_back("baseline_probs.csv");
    }
    return {{"split", in.split}, {"samples", n}, {"outputs", outputs}};
}

json cmd_eval(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto data = io::ingest(in.data);
    const auto rows = select_rows(data, in.split);
    const auto marg_table = read_table_csv(in.marginals);
    const auto map_table = read_table_csv(in.map);
    // Evaluate the dataset labels that the model predicts, in dataset order.
    std::vector<std::string> names;
    for (const auto& l : data.data.label_names)
        if (std::find(marg_table.header.begin(), marg_table.header.end(), l) != marg_table.header.end())
            names.push_back(l);
    if (names.empty()) throw InvalidInput("marginals share no label names with the dataset");
    const auto aligned = align_labels(data.data, names).subset(to_int_rows(rows));
    const Matrix marg = pick_columns(marg_table, names, in.marginals);
    const LabelMatrix map = to_labels(pick_columns(map_table, names, in.map), in.map);
    if (marg.rows() != aligned.size() || map.rows() != aligned.size()) {
        throw InvalidInput("prediction rows (" + std::to_string(marg.rows()) + ") do not match the '" + in.split +
                           "' split (" + std::to_string(aligned.size()) + " rows)");
    }
    const auto grid = eval::default_grid(cfg.threshold_points);
    const auto cltm = eval::prf(map, aligned.labels);
    io::write_text(out / "pr_curve.csv", pr_csv(eval::pr_curve(marg, aligned.labels, grid), names));

    json report{{"split", in.split}, {"samples", aligned.size()}, {"labels", names},
                {"cltm_map", metrics_json(cltm, names)}};
    json summary{{"cltm_micro_f", cltm.micro_f}, {"outputs", {"metrics.json", "pr_curve.csv"}}};
    if (!in.baseline_probs.empty()) {
        const auto bt = read_table_csv(in.baseline_probs);
        const Matrix probs = pick_columns(bt, names, in.baseline_probs);
        if (probs.rows() != aligned.size()) throw InvalidInput("baseline probability rows do not match the split");
        const auto base = eval::prf(eval::threshold_scores(probs, 0.5), aligned.labels);
        report["baseline_threshold_0.5"] = metrics_json(base, names);
        io::write_text(out / "baseline_pr_curve.csv", pr_csv(eval::pr_curve(probs, aligned.labels, grid), names));
        summary["baseline_micro_f"] = base.micro_f;
        summary["outputs"].push_back("baseline_pr_curve.csv");
    }
    report["config"] = provenance(cfg);
    io::write_json(out / "metrics.json", report);
    return summary;
}

json cmd_scene(const io::RunConfig& cfg, const Inputs& in, const fs::path& out) {
    const auto data = io::ingest(in.data);
    if (!data.data.scenes) throw InvalidInput("scene: dataset has no scene labels");
    const auto rows = select_rows(data, in.split);
    const auto subset = data.data.subset(to_int_rows(rows));
    const auto source = eval::parse_scene_source(cfg.scene.source);
    Matrix vecs;
    if (source == eval::SceneSource::Baseline) {
        if (in.baseline.empty()) throw InvalidInput("scene: source 'baseline' needs --baseline");
        vecs = eval::scene_feature_vectors(nn::baseline_from_json(io::read_json(in.baseline)), subset);
    } else {
        if (in.model.empty()) throw InvalidInput("scene: --model is required");
        vecs = eval::scene_feature_vectors(nn::model_from_json(io::read_json(in.model)), subset, source, cfg.threads);
    }
    int k = cfg.scene.k;
    if (k == 0) k = static_cast<int>(std::set<int>(subset.scenes->begin(), subset.scenes->end()).size());
    const auto km = eval::kmeans(vecs, k, cfg.scene.restarts, derive_seed(cfg.seed, "scene"), cfg.scene.max_iter,
                                 cfg.threads);
    const auto ev = eval::match_clusters(km.assignment, *subset.scenes, k);
    std::vector<std::vector<int>> contingency;
    for (Eigen::Index c = 0; c < ev.contingency.rows(); ++c) {
        contingency.emplace_back();
        for (Eigen::Index s = 0; s < ev.contingency.cols(); ++s) contingency.back().push_back(ev.contingency(c, s));
    }
    io::write_json(out / "scene.json", {{"source", cfg.scene.source},
                                        {"split", in.split},
                                        {"k", k},
                                        {"rows", rows},
                                        {"assignment", ev.assignment},
                                        {"scene_ids", ev.scene_ids},
                                        {"contingency", contingency},
                                        {"matched_scene", ev.matched_scene},
                                        {"matched", ev.matched},
                                        {"misclassification", ev.misclassification},
                                        {"inertia", km.inertia},
                                        {"config", provenance(cfg)}});
    return {{"k", k}, {"misclassification", ev.misclassification}, {"outputs", {"scene.json"}}};
}

std::string error_kind(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e)) return err->kind();
    return "internal";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditional latent tree models: distances, structure, training, inference, evaluation"};
    app.require_subcommand(1);
    Common common;
    Inputs in;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON run configuration");
        sub->add_option("--seed", common.seed, "master seed (overrides config)");
        sub->add_option("--out-dir", common.out_dir, "output directory")->capture_default_str();
        sub->add_option("--threads", common.threads, "worker threads (overrides config)");
    };
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with ground truth");
    auto* distances = app.add_subcommand("distances", "estimate conditional label distances");
    auto* structure = app.add_subcommand("structure", "learn a latent tree from distances");
    auto* train = app.add_subcommand("train", "train the CLTM and the independent baseline");
    auto* infer = app.add_subcommand("infer", "marginals, MAP and latent activations");
    auto* evaluate = app.add_subcommand("eval", "precision, recall, F and PR curves");
    auto* scene = app.add_subcommand("scene", "k-means scene clustering with matching");
    for (auto* s : {synth, distances, structure, train, infer, evaluate, scene}) add_common(s);

    for (auto* s : {distances, train, infer, evaluate, scene})
        s->add_option("--data", in.data, "dataset manifest")->required();
    structure->add_option("--distances", in.distances, "distance CSV")->required();
    train->add_option("--tree", in.tree, "tree JSON")->required();
    infer->add_option("--model", in.model, "model JSON")->required();
    infer->add_option("--baseline", in.baseline, "baseline model JSON");
    infer->add_option("--top-k", in.top_k, "samples listed per latent node")->check(CLI::NonNegativeNumber);
    scene->add_option("--model", in.model, "model JSON");
    scene->add_option("--baseline", in.baseline, "baseline model JSON");
    evaluate->add_option("--marginals", in.marginals, "marginals CSV")->required();
    evaluate->add_option("--map", in.map, "MAP CSV")->required();
    evaluate->add_option("--baseline-probs", in.baseline_probs, "baseline probabilities CSV");
    for (auto* s : {infer, evaluate}) s->add_option("--split", in.split, "train, validation or all")->capture_default_str();
    scene->add_option("--split", in.split, "train, validation or all")->default_str("all");

    std::string command = "cltm";
    try {
        in.split = "validation";
        app.parse(argc, argv);
        if (scene->parsed() && scene->count("--split") == 0) in.split = "all";
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const auto start = std::chrono::steady_clock::now();
    try {
        const auto cfg = resolve_config(common);
        const fs::path out = common.out_dir;
        fs::create_directories(out);
        json summary;
        if (synth->parsed()) command = "synth", summary = cmd_synth(cfg, out);
        else if (distances->parsed()) command = "distances", summary = cmd_distances(cfg, in, out);
        else if (structure->parsed()) command = "structure", summary = cmd_structure(cfg, in, out);
        else if (train->parsed()) command = "train", summary = cmd_train(cfg, in, out);
        else if (infer->parsed()) command = "infer", summary = cmd_infer(cfg, in, out);
        else if (evaluate->parsed()) command = "eval", summary = cmd_eval(cfg, in, out);
        else if (scene->parsed()) command = "scene", summary = cmd_scene(cfg, in, out);
        summary["command"] = command;
        summary["status"] = "ok";
        summary["seed"] = cfg.seed;
        summary["elapsed_ms"] =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        std::cout << summary.dump() << std::endl;
        return 0;
    } catch (const std::exception& e) {
        for (auto* s : app.get_subcommands()) command = s->get_name();
        json err{{"status", "error"}, {"command", command}, {"kind", error_kind(e)}, {"message", e.what()}};
        if (const auto* t = dynamic_cast<const TrainingError*>(&e)) err["epoch"] = t->epoch();
        std::cerr << err.dump() << std::endl;
        return 1;
    }
}
