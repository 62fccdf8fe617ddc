#pragma once

// File formats and run configuration.
//
// Manifest (JSON, paths relative to the manifest file):
//   {"n": 100, "d": 4, "L": 3, "label_names": [...], "features": "x.csv" | "x.bin",
//    "labels": "y.csv", "scenes": "s.csv", "split": {"train": [...], "validation": [...]}}
// Feature binary: "CLTMFEAT", u64 rows, u64 cols (little endian), f64 row-major.

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cltm/common.hpp"
#include "cltm/dataset.hpp"
#include "cltm/kernel_distance.hpp"
#include "cltm/neural_potentials.hpp"
#include "cltm/structure_learning.hpp"
#include "cltm/synthetic.hpp"

namespace cltm::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
    if (!out) throw IoError("write failed for " + p.string());
}

inline json read_json(const fs::path& p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::parse_error& e) {
        throw InvalidInput(p.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    return json(v).dump();
}

// ---------------------------------------------------------------------------
// CSV

using CsvRows = std::vector<std::vector<std::string>>;

inline CsvRows parse_csv(const std::string& text) {
    CsvRows rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            const auto b = cell.find_first_not_of(" \t");
            const auto e = cell.find_last_not_of(" \t");
            cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
        }
        if (line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline double parse_double(const std::string& s, const std::string& where) {
    if (s.empty()) throw InvalidInput(where + ": empty value");
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) throw InvalidInput(where + ": not a number '" + s + "'");
    return v;
}

inline std::string cell_ref(const fs::path& p, std::size_t r, std::size_t c) {
    return p.filename().string() + " row " + std::to_string(r) + ", column " + std::to_string(c);
}

inline Matrix read_matrix_csv(const fs::path& p) {
    const auto rows = parse_csv(read_text(p));
    if (rows.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) {
            throw InvalidInput(p.filename().string() + " row " + std::to_string(r) + ": expected " +
                               std::to_string(rows[0].size()) + " columns, found " + std::to_string(rows[r].size()));
        }
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            const double v = parse_double(rows[r][c], cell_ref(p, r, c));
            if (!std::isfinite(v)) throw InvalidInput(cell_ref(p, r, c) + ": non-finite value");
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
        }
    }
    return m;
}

inline std::string matrix_to_csv(const Matrix& m) {
    std::string s;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) s += ',';
            s += format_double(m(r, c));
        }
        s += '\n';
    }
    return s;
}

inline LabelMatrix read_labels_csv(const fs::path& p) {
    const auto rows = parse_csv(read_text(p));
    if (rows.empty()) return LabelMatrix(0, 0);
    LabelMatrix y(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) {
            throw InvalidInput(p.filename().string() + " row " + std::to_string(r) + ": ragged label row");
        }
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            const auto& v = rows[r][c];
            if (v != "0" && v != "1") {
                throw InvalidInput(cell_ref(p, r, c) + ": label must be 0 or 1, found '" + v + "'");
            }
            y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v == "1";
        }
    }
    return y;
}

inline std::string labels_to_csv(const LabelMatrix& y) {
    std::string s;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
            if (c) s += ',';
            s += std::to_string(y(r, c));
        }
        s += '\n';
    }
    return s;
}

inline std::vector<int> read_ints(const fs::path& p) {
    const auto rows = parse_csv(read_text(p));
    std::vector<int> out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != 1) throw InvalidInput(p.filename().string() + " row " + std::to_string(r) + ": expected one value");
        char* end = nullptr;
        const long v = std::strtol(rows[r][0].c_str(), &end, 10);
        if (rows[r][0].empty() || *end != '\0') throw InvalidInput(cell_ref(p, r, 0) + ": not an integer");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

inline std::string ints_to_csv(const std::vector<int>& v) {
    std::string s;
    for (int x : v) s += std::to_string(x) + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Binary features

inline constexpr char kFeatureMagic[8] = {'C', 'L', 'T', 'M', 'F', 'E', 'A', 'T'};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.append(b, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw InvalidInput("feature binary: truncated file");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace detail

inline std::string features_to_binary(const Matrix& x) {
    std::string s(kFeatureMagic, 8);
    detail::put_le<std::uint64_t>(s, static_cast<std::uint64_t>(x.rows()));
    detail::put_le<std::uint64_t>(s, static_cast<std::uint64_t>(x.cols()));
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) detail::put_le<double>(s, x(r, c));
    return s;
}

inline Matrix features_from_binary(const std::string& s) {
    if (s.size() < 24 || std::memcmp(s.data(), kFeatureMagic, 8) != 0) throw InvalidInput("feature binary: bad magic");
    std::size_t pos = 8;
    const auto rows = detail::get_le<std::uint64_t>(s, pos);
    const auto cols = detail::get_le<std::uint64_t>(s, pos);
    if (s.size() != 24 + rows * cols * 8) throw InvalidInput("feature binary: size does not match header dims");
    Matrix x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = detail::get_le<double>(s, pos);
    return x;
}

inline Matrix read_features(const fs::path& p) {
    if (p.extension() == ".bin") return features_from_binary(read_text(p));
    return read_matrix_csv(p);
}

inline void write_features(const fs::path& p, const Matrix& x) {
    write_text(p, p.extension() == ".bin" ? features_to_binary(x) : matrix_to_csv(x));
}

// ---------------------------------------------------------------------------
// Manifest

struct Manifest {
    Eigen::Index n = 0, d = 0, l = 0;
    std::vector<std::string> label_names;
    fs::path features, labels;
    std::optional<fs::path> scenes;
    std::optional<std::vector<Eigen::Index>> train, validation;
};

inline Manifest read_manifest(const fs::path& path) {
    const json j = read_json(path);
    const fs::path base = path.parent_path();
    Manifest m;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "n") m.n = v.get<Eigen::Index>();
            else if (key == "d") m.d = v.get<Eigen::Index>();
            else if (key == "L") m.l = v.get<Eigen::Index>();
            else if (key == "label_names") m.label_names = v.get<std::vector<std::string>>();
            else if (key == "features") m.features = base / v.get<std::string>();
            else if (key == "labels") m.labels = base / v.get<std::string>();
            else if (key == "scenes") m.scenes = base / v.get<std::string>();
            else if (key == "split") {
                for (const auto& [sk, sv] : v.items()) {
                    if (sk == "train") m.train = sv.get<std::vector<Eigen::Index>>();
                    else if (sk == "validation") m.validation = sv.get<std::vector<Eigen::Index>>();
                    else throw InvalidInput("manifest: unknown split key '" + sk + "'");
                }
            } else {
                throw InvalidInput("manifest: unknown key '" + key + "'");
            }
        }
        if (!j.contains("features") || !j.contains("labels") || !j.contains("n") || !j.contains("d") || !j.contains("L")) {
            throw InvalidInput("manifest: n, d, L, features and labels are required");
        }
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("manifest: ") + e.what());
    }
    if (m.label_names.empty()) {
        for (Eigen::Index k = 0; k < m.l; ++k) m.label_names.push_back("y" + std::to_string(k));
    }
    if (static_cast<Eigen::Index>(m.label_names.size()) != m.l) throw InvalidInput("manifest: label_names length != L");
    return m;
}

struct IngestReport {
    std::vector<double> label_frequencies;
    std::vector<std::string> constant_labels;
};

struct Ingested {
    Manifest manifest;
    LabeledDataset data;
    IngestReport report;
};

inline Ingested ingest(const fs::path& manifest_path) {
    Ingested in;
    in.manifest = read_manifest(manifest_path);
    const auto& m = in.manifest;
    in.data.features = read_features(m.features);
    in.data.labels = read_labels_csv(m.labels);
    in.data.label_names = m.label_names;
    if (in.data.features.rows() != m.n || in.data.features.cols() != m.d) {
        throw InvalidInput("manifest declares features " + std::to_string(m.n) + "x" + std::to_string(m.d) + " but " +
                           m.features.filename().string() + " is " + std::to_string(in.data.features.rows()) + "x" +
                           std::to_string(in.data.features.cols()));
    }
    if (in.data.labels.rows() != m.n || in.data.labels.cols() != m.l) {
        throw InvalidInput("manifest declares labels " + std::to_string(m.n) + "x" + std::to_string(m.l) + " but " +
                           m.labels.filename().string() + " is " + std::to_string(in.data.labels.rows()) + "x" +
                           std::to_string(in.data.labels.cols()));
    }
    if (m.scenes) {
        in.data.scenes = read_ints(*m.scenes);
        if (static_cast<Eigen::Index>(in.data.scenes->size()) != m.n) throw InvalidInput("scene file length != n");
    }
    for (const auto* split : {&m.train, &m.validation}) {
        if (!*split) continue;
        for (auto i : **split)
            if (i < 0 || i >= m.n) throw InvalidInput("manifest: split index " + std::to_string(i) + " out of range");
    }
    in.data.validate();
    for (Eigen::Index k = 0; k < m.l; ++k) {
        const double f = m.n > 0 ? in.data.labels.col(k).cast<double>().mean() : 0.0;
        in.report.label_frequencies.push_back(f);
        if (f == 0.0 || f == 1.0) in.report.constant_labels.push_back(m.label_names[static_cast<std::size_t>(k)]);
    }
    return in;
}

inline std::vector<Eigen::Index> split_rows(const Ingested& in, bool validation) {
    const auto& s = validation ? in.manifest.validation : in.manifest.train;
    if (s) return *s;
    std::vector<Eigen::Index> all;
    if (!validation)
        for (Eigen::Index i = 0; i < in.data.size(); ++i) all.push_back(i);
    return all;
}

/// Writes features, labels, optional scenes and a manifest into `dir`.
inline void write_dataset(const fs::path& dir, const LabeledDataset& data, const std::vector<Eigen::Index>& train,
                          const std::vector<Eigen::Index>& validation, bool binary_features = false) {
    fs::create_directories(dir);
    const std::string fx = binary_features ? "features.bin" : "features.csv";
    write_features(dir / fx, data.features);
    write_text(dir / "labels.csv", labels_to_csv(data.labels));
    json j{{"n", data.size()}, {"d", data.dim()}, {"L", data.label_count()}, {"label_names", data.label_names},
           {"features", fx},   {"labels", "labels.csv"}};
    if (data.scenes) {
        write_text(dir / "scenes.csv", ints_to_csv(*data.scenes));
        j["scenes"] = "scenes.csv";
    }
    j["split"] = {{"train", train}, {"validation", validation}};
    write_json(dir / "manifest.json", j);
}

// ---------------------------------------------------------------------------
// Distance matrices: headerless CSV plus a JSON sidecar naming the columns.

inline fs::path sidecar_path(fs::path csv) { return csv.replace_extension(".json"); }

inline void write_distances(const fs::path& csv, const kernel::DistanceMatrix& dm, const json& sidecar) {
    write_text(csv, matrix_to_csv(dm.entries));
    json side = sidecar;
    side["names"] = dm.names;
    side["clamp_ceiling"] = dm.clamp_ceiling;
    write_json(sidecar_path(csv), side);
}

inline kernel::DistanceMatrix read_distances(const fs::path& csv) {
    kernel::DistanceMatrix dm;
    dm.entries = read_matrix_csv(csv);
    if (dm.entries.rows() != dm.entries.cols() || dm.entries.rows() == 0) {
        throw InvalidInput(csv.filename().string() + ": expected a nonempty square matrix");
    }
    const auto sp = sidecar_path(csv);
    if (fs::exists(sp)) {
        const json side = read_json(sp);
        try {
            if (side.contains("names")) dm.names = side["names"].get<std::vector<std::string>>();
            if (side.contains("clamp_ceiling")) dm.clamp_ceiling = side["clamp_ceiling"].get<double>();
        } catch (const json::exception& e) {
            throw InvalidInput(sp.filename().string() + ": " + e.what());
        }
    }
    if (dm.names.empty()) {
        for (Eigen::Index k = 0; k < dm.entries.rows(); ++k) dm.names.push_back("y" + std::to_string(k));
    }
    if (static_cast<Eigen::Index>(dm.names.size()) != dm.entries.rows()) {
        throw InvalidInput(sp.filename().string() + ": name count does not match matrix size");
    }
    dm.validate();
    return dm;
}

// ---------------------------------------------------------------------------
// Run configuration

struct SynthConfig {
    synthetic::ModelRecipe recipe;
    int n = 1000;
    double train_fraction = 0.8;
    bool binary_features = false;
};

struct SceneConfig {
    int k = 0;  // 0 = number of distinct scene labels
    int restarts = 20;
    int max_iter = 300;
    std::string source = "hidden";
};

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;
    kernel::CondDistanceOptions distances;
    structure::ClrgOptions structure;
    nn::TrainConfig train;
    int threshold_points = 101;
    SceneConfig scene;
    SynthConfig synth;
};

namespace detail {

template <typename F>
void visit_keys(const json& j, const std::string& section, F&& on_key) {
    if (!j.is_object()) throw InvalidInput("config: section '" + section + "' must be an object");
    for (const auto& [key, v] : j.items()) {
        if (!on_key(key, v)) throw InvalidInput("config: unknown key '" + (section.empty() ? key : section + "." + key) + "'");
    }
}

}  // namespace detail

inline json config_to_json(const RunConfig& c) {
    const auto& d = c.distances;
    const auto& r = c.synth.recipe;
    return {
        {"seed", c.seed},
        {"threads", c.threads},
        {"distances",
         {{"gamma", d.gamma ? json(*d.gamma) : json(nullptr)},
          {"lambda", d.lambda},
          {"scale_lambda_by_n", d.scale_lambda_by_n},
          {"query_subsample", d.query_subsample},
          {"landmarks", d.landmarks},
          {"gamma_pairs", d.gamma_pairs},
          {"det_floor", d.distance.det_floor},
          {"clamp_ceiling", d.distance.clamp_ceiling}}},
        {"structure", {{"epsilon", c.structure.epsilon}, {"relative", c.structure.relative}}},
        {"train", nn::config_to_json(c.train)},
        {"eval", {{"threshold_points", c.threshold_points}}},
        {"scene",
         {{"k", c.scene.k}, {"restarts", c.scene.restarts}, {"max_iter", c.scene.max_iter}, {"source", c.scene.source}}},
        {"synth",
         {{"observed", r.observed},
          {"latent", r.latent},
          {"clusters", r.clusters},
          {"dim", r.dim},
          {"noise_scale", r.noise_scale},
          {"center_radius", r.center_radius},
          {"coupling_min", r.coupling_min},
          {"coupling_max", r.coupling_max},
          {"node_offset", r.node_offset},
          {"n", c.synth.n},
          {"train_fraction", c.synth.train_fraction},
          {"binary_features", c.synth.binary_features}}},
    };
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    try {
        detail::visit_keys(j, "", [&](const std::string& key, const json& v) {
            if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "threads") c.threads = v.get<int>();
            else if (key == "distances") {
                auto& d = c.distances;
                detail::visit_keys(v, key, [&](const std::string& k, const json& x) {
                    if (k == "gamma") d.gamma = x.is_null() ? std::nullopt : std::optional<double>(x.get<double>());
                    else if (k == "lambda") d.lambda = x.get<double>();
                    else if (k == "scale_lambda_by_n") d.scale_lambda_by_n = x.get<bool>();
                    else if (k == "query_subsample") d.query_subsample = x.get<std::size_t>();
                    else if (k == "landmarks") d.landmarks = x.get<std::size_t>();
                    else if (k == "gamma_pairs") d.gamma_pairs = x.get<std::size_t>();
                    else if (k == "det_floor") d.distance.det_floor = x.get<double>();
                    else if (k == "clamp_ceiling") d.distance.clamp_ceiling = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (key == "structure") {
                detail::visit_keys(v, key, [&](const std::string& k, const json& x) {
                    if (k == "epsilon") c.structure.epsilon = x.get<double>();
                    else if (k == "relative") c.structure.relative = x.get<bool>();
                    else return false;
                    return true;
                });
            } else if (key == "train") {
                c.train = nn::config_from_json(v);
            } else if (key == "eval") {
                detail::visit_keys(v, key, [&](const std::string& k, const json& x) {
                    if (k == "threshold_points") c.threshold_points = x.get<int>();
                    else return false;
                    return true;
                });
            } else if (key == "scene") {
                detail::visit_keys(v, key, [&](const std::string& k, const json& x) {
                    if (k == "k") c.scene.k = x.get<int>();
                    else if (k == "restarts") c.scene.restarts = x.get<int>();
                    else if (k == "max_iter") c.scene.max_iter = x.get<int>();
                    else if (k == "source") c.scene.source = x.get<std::string>();
                    else return false;
                    return true;
                });
            } else if (key == "synth") {
                auto& r = c.synth.recipe;
                detail::visit_keys(v, key, [&](const std::string& k, const json& x) {
                    if (k == "observed") r.observed = x.get<int>();
                    else if (k == "latent") r.latent = x.get<int>();
                    else if (k == "clusters") r.clusters = x.get<int>();
                    else if (k == "dim") r.dim = x.get<int>();
                    else if (k == "noise_scale") r.noise_scale = x.get<double>();
                    else if (k == "center_radius") r.center_radius = x.get<double>();
                    else if (k == "coupling_min") r.coupling_min = x.get<double>();
                    else if (k == "coupling_max") r.coupling_max = x.get<double>();
                    else if (k == "node_offset") r.node_offset = x.get<double>();
                    else if (k == "n") c.synth.n = x.get<int>();
                    else if (k == "train_fraction") c.synth.train_fraction = x.get<double>();
                    else if (k == "binary_features") c.synth.binary_features = x.get<bool>();
                    else return false;
                    return true;
                });
            } else {
                return false;
            }
            return true;
        });
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    if (c.threads < 1) throw InvalidInput("config: threads must be >= 1");
    if (c.threshold_points < 2) throw InvalidInput("config: eval.threshold_points must be >= 2");
    if (c.scene.k < 0 || c.scene.restarts < 1 || c.scene.max_iter < 1) throw InvalidInput("config: bad scene settings");
    if (c.scene.source != "hidden" && c.scene.source != "observed+hidden" && c.scene.source != "baseline") {
        throw InvalidInput("config: scene.source must be hidden, observed+hidden or baseline");
    }
    if (c.distances.lambda <= 0.0) throw InvalidInput("config: distances.lambda must be > 0");
    if (c.distances.gamma && *c.distances.gamma <= 0.0) throw InvalidInput("config: distances.gamma must be > 0");
    if (c.structure.epsilon <= 0.0) throw InvalidInput("config: structure.epsilon must be > 0");
    if (!(c.synth.train_fraction > 0.0 && c.synth.train_fraction <= 1.0)) {
        throw InvalidInput("config: synth.train_fraction must be in (0, 1]");
    }
    if (c.synth.n < 1) throw InvalidInput("config: synth.n must be >= 1");
    return c;
}

inline RunConfig load_config(const std::optional<fs::path>& p) {
    if (!p) return RunConfig{};
    return config_from_json(read_json(*p));
}

}  // namespace cltm::io
