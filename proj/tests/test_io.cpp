#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cltm/io.hpp"

using namespace cltm;
using namespace cltm::io;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cltm_io_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

LabeledDataset small_dataset() {
    LabeledDataset d;
    d.features.resize(3, 2);
    d.features << 0.1, -2.5, 1e-17, 3.0, 7.25, 1.0 / 3.0;
    d.labels.resize(3, 2);
    d.labels << 1, 0, 0, 0, 1, 0;
    d.label_names = {"sky", "sea"};
    d.scenes = std::vector<int>{2, 0, 2};
    return d;
}

}  // namespace

TEST(Csv, MatrixRoundTripIsExact) {
    const auto dir = scratch("csv");
    Matrix m(2, 3);
    m << 0.1, -1e-300, 123456789.123, 1.0 / 3.0, 0.0, -7.5;
    write_text(dir / "m.csv", matrix_to_csv(m));
    EXPECT_EQ(read_matrix_csv(dir / "m.csv"), m);
}

TEST(Csv, ErrorsNameRowAndColumn) {
    const auto dir = scratch("csv_err");
    write_text(dir / "bad.csv", "1,2\n3,x\n");
    try {
        read_matrix_csv(dir / "bad.csv");
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("row 1, column 1"), std::string::npos) << e.what();
    }
    write_text(dir / "ragged.csv", "1,2\n3\n");
    EXPECT_THROW(read_matrix_csv(dir / "ragged.csv"), InvalidInput);
    write_text(dir / "nan.csv", "1,nan\n");
    EXPECT_THROW(read_matrix_csv(dir / "nan.csv"), InvalidInput);
    write_text(dir / "labels.csv", "0,1\n2,0\n");
    try {
        read_labels_csv(dir / "labels.csv");
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("row 1, column 0"), std::string::npos) << e.what();
    }
    EXPECT_THROW(read_text(dir / "missing.csv"), IoError);
}

TEST(BinaryFeatures, RoundTripAndCorruption) {
    const auto dir = scratch("bin");
    Matrix m = Matrix::Random(5, 4);
    write_features(dir / "f.bin", m);
    EXPECT_EQ(read_features(dir / "f.bin"), m);
    auto bytes = features_to_binary(m);
    EXPECT_EQ(bytes.substr(0, 8), "CLTMFEAT");
    EXPECT_EQ(bytes.size(), 8u + 16u + 20u * 8u);
    EXPECT_THROW(features_from_binary(bytes.substr(0, bytes.size() - 1)), InvalidInput);
    bytes[0] = 'X';
    EXPECT_THROW(features_from_binary(bytes), InvalidInput);
}

TEST(Dataset, WriteThenIngest) {
    const auto dir = scratch("dataset");
    const auto d = small_dataset();
    for (bool binary : {false, true}) {
        write_dataset(dir, d, {0, 2}, {1}, binary);
        const auto in = ingest(dir / "manifest.json");
        EXPECT_EQ(in.data.features, d.features);
        EXPECT_EQ(in.data.labels, d.labels);
        EXPECT_EQ(in.data.label_names, d.label_names);
        EXPECT_EQ(*in.data.scenes, *d.scenes);
        EXPECT_EQ(split_rows(in, false), (std::vector<Eigen::Index>{0, 2}));
        EXPECT_EQ(split_rows(in, true), (std::vector<Eigen::Index>{1}));
        EXPECT_EQ(in.report.constant_labels, std::vector<std::string>{"sea"});
        EXPECT_NEAR(in.report.label_frequencies[0], 2.0 / 3.0, 1e-15);
    }
}

TEST(Dataset, ManifestErrors) {
    const auto dir = scratch("manifest");
    write_dataset(dir, small_dataset(), {0, 1, 2}, {});
    auto j = read_json(dir / "manifest.json");

    auto extra = j;
    extra["colour"] = 1;
    write_json(dir / "manifest.json", extra);
    EXPECT_THROW(ingest(dir / "manifest.json"), InvalidInput);

    auto shape = j;
    shape["d"] = 3;
    write_json(dir / "manifest.json", shape);
    try {
        ingest(dir / "manifest.json");
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("3x3"), std::string::npos) << e.what();
    }

    auto split = j;
    split["split"]["train"] = {0, 5};
    write_json(dir / "manifest.json", split);
    EXPECT_THROW(ingest(dir / "manifest.json"), InvalidInput);

    auto missing = j;
    missing.erase("labels");
    write_json(dir / "manifest.json", missing);
    EXPECT_THROW(ingest(dir / "manifest.json"), InvalidInput);

    auto names = j;
    names["label_names"] = {"only"};
    write_json(dir / "manifest.json", names);
    EXPECT_THROW(ingest(dir / "manifest.json"), InvalidInput);
}

TEST(Distances, RoundTripWithSidecar) {
    const auto dir = scratch("dist");
    kernel::DistanceMatrix dm;
    dm.entries.resize(3, 3);
    dm.entries << 0, 1.5, 2.25, 1.5, 0, 20, 2.25, 20, 0;
    dm.names = {"a", "b", "c"};
    write_distances(dir / "d.csv", dm, {{"gamma", 0.5}});
    EXPECT_TRUE(fs::exists(dir / "d.json"));
    const auto back = read_distances(dir / "d.csv");
    EXPECT_EQ(back.entries, dm.entries);
    EXPECT_EQ(back.names, dm.names);
    EXPECT_EQ(back.clamp_ceiling, 20.0);
    EXPECT_EQ(read_json(dir / "d.json")["gamma"], 0.5);
    EXPECT_EQ(read_text(dir / "d.csv").find_first_of("abc"), std::string::npos);

    write_text(dir / "asym.csv", "0,1\n2,0\n");
    EXPECT_THROW(read_distances(dir / "asym.csv"), InvalidInput);
    write_text(dir / "rect.csv", "0,1,2\n1,0,2\n");
    EXPECT_THROW(read_distances(dir / "rect.csv"), InvalidInput);
}

TEST(Config, DefaultsRoundTrip) {
    const RunConfig c;
    const auto j = config_to_json(c);
    EXPECT_EQ(config_to_json(config_from_json(j)), j);
    EXPECT_TRUE(j["distances"]["gamma"].is_null());
    EXPECT_EQ(j["distances"]["lambda"], 1e-3);
    EXPECT_EQ(j["eval"]["threshold_points"], 101);
}

TEST(Config, PartialOverridesAndUnknownKeys) {
    const auto c = config_from_json(nlohmann::json::parse(R"({"seed": 7, "train": {"epochs": 3}, "distances": {"gamma": 0.25}})"));
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.train.epochs, 3);
    EXPECT_EQ(*c.distances.gamma, 0.25);
    EXPECT_EQ(c.train.batch_size, nn::TrainConfig{}.batch_size);

    for (const char* bad : {R"({"sed": 1})", R"({"train": {"epoch": 3}})", R"({"distances": {"lamda": 1}})",
                            R"({"scene": {"source": "latent"}})", R"({"threads": 0})", R"({"distances": {"lambda": -1}})",
                            R"({"seed": "x"})", R"({"synth": {"train_fraction": 0}})"}) {
        EXPECT_THROW(config_from_json(nlohmann::json::parse(bad)), InvalidInput) << bad;
    }
}

TEST(Config, LoadFromFile) {
    const auto dir = scratch("config");
    write_text(dir / "c.json", R"({"threads": 2})");
    EXPECT_EQ(load_config(dir / "c.json").threads, 2);
    EXPECT_EQ(load_config(std::nullopt).threads, 1);
    write_text(dir / "broken.json", "{");
    EXPECT_THROW(load_config(dir / "broken.json"), InvalidInput);
}
