#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "capsdec/data_io.hpp"
#include "capsdec/encoding.hpp"

using namespace capsdec;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / name; }

CapsNetConfig tiny_config() {
    CapsNetConfig cfg;
    cfg.image_h = cfg.image_w = 9;
    cfg.conv1_channels = 4;
    cfg.kernel = 3;
    cfg.primary_maps = 2;
    cfg.primary_dim = 3;
    cfg.primary_stride = 3;
    cfg.num_classes = 2;
    cfg.digit_dim = 4;
    cfg.decoder_hidden1 = 16;
    cfg.decoder_hidden2 = 24;
    return cfg;
}

ImageDataset<float> tiny_stimuli(const CapsNetConfig& cfg, int64_t n, uint64_t seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    ImageDataset<float> ds;
    ds.height = cfg.image_h;
    ds.width = cfg.image_w;
    ds.pixels.resize(static_cast<size_t>(n * cfg.pixels()));
    for (auto& v : ds.pixels) v = dist(gen);
    ds.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) ds.labels[static_cast<size_t>(i)] = static_cast<int>(i % 2);
    return ds;
}

}  // namespace

TEST_CASE("IDX writer/loader round-trips a 2-image fixture") {
    ImageDataset<float> ds;
    ds.height = 3;
    ds.width = 2;
    ds.pixels = {0, 1.0f / 255, 2.0f / 255, 3.0f / 255, 4.0f / 255, 5.0f / 255,
                 250.0f / 255, 251.0f / 255, 252.0f / 255, 253.0f / 255, 254.0f / 255, 1.0f};
    ds.labels = {3, 8};
    const auto img_path = tmp("capsdec_idx_images");
    const auto lab_path = tmp("capsdec_idx_labels");
    save_mnist(img_path.string(), lab_path.string(), ds);
    auto loaded = load_mnist(img_path.string(), lab_path.string());
    CHECK(loaded.height == 3);
    CHECK(loaded.width == 2);
    CHECK(loaded.pixels == ds.pixels);
    CHECK(loaded.labels == ds.labels);
    fs::remove(img_path);
    fs::remove(lab_path);
}

TEST_CASE("IDX loader rejects malformed files") {
    const auto img_path = tmp("capsdec_idx_bad_images");
    const auto lab_path = tmp("capsdec_idx_bad_labels");

    SECTION("wrong magic, no partial load") {
        {
            std::ofstream f(img_path, std::ios::binary);
            const unsigned char magic[4] = {0, 0, 8, 4};  // not 0x00000803
            f.write(reinterpret_cast<const char*>(magic), 4);
        }
        try {
            load_mnist(img_path.string(), lab_path.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
        }
    }
    SECTION("truncated image payload") {
        {
            std::ofstream f(img_path, std::ios::binary);
            const unsigned char header[16] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
            f.write(reinterpret_cast<const char*>(header), 16);
            f.put(char(0));  // 1 byte instead of 8
        }
        {
            std::ofstream f(lab_path, std::ios::binary);
            const unsigned char header[8] = {0, 0, 8, 1, 0, 0, 0, 2};
            f.write(reinterpret_cast<const char*>(header), 8);
            f.put(char(1));
            f.put(char(2));
        }
        CHECK_THROWS_AS(load_mnist(img_path.string(), lab_path.string()), FormatError);
    }
    SECTION("image/label count mismatch") {
        ImageDataset<float> ds;
        ds.height = ds.width = 2;
        ds.pixels.assign(8, 0.5f);
        ds.labels = {1, 2};
        save_mnist(img_path.string(), lab_path.string(), ds);
        {
            std::ofstream f(lab_path, std::ios::binary);
            const unsigned char header[8] = {0, 0, 8, 1, 0, 0, 0, 3};
            f.write(reinterpret_cast<const char*>(header), 8);
            f.put(char(1));
            f.put(char(2));
            f.put(char(3));
        }
        CHECK_THROWS_AS(load_mnist(img_path.string(), lab_path.string()), FormatError);
    }
    fs::remove(img_path);
    fs::remove(lab_path);
}

TEST_CASE("bundled digit subset loads with the documented shapes") {
    const std::string dir = CAPSDEC_DATA_DIR "/mnist";
    auto train = load_mnist(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
    CHECK(train.size() == 9000);
    CHECK(train.height == 28);
    CHECK(train.width == 28);
    auto test = load_mnist(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
    CHECK(test.size() == 1000);
    std::map<int, int> counts;
    for (int lab : test.labels) counts[lab]++;
    for (int c = 0; c < 10; ++c) CHECK(counts[c] == 100);
    for (float v : test.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("fMRI CSV round-trips bit-exactly") {
    VoxelDataset ds;
    ds.image_h = ds.image_w = 28;
    ds.voxel_count = 7;
    std::mt19937 gen(1);
    std::uniform_real_distribution<float> pix(0.0f, 1.0f);
    std::normal_distribution<float> vox(0.0f, 1.0f);
    for (int i = 0; i < 3; ++i) {
        ds.labels.push_back(i % 2 ? 9 : 6);
        for (int j = 0; j < 784; ++j) ds.images.push_back(pix(gen));
        for (int j = 0; j < 7; ++j) ds.voxels.push_back(vox(gen));
    }
    const auto path = tmp("capsdec_test_fmri.csv");
    write_fmri_csv(path.string(), ds);
    auto loaded = load_fmri_csv(path.string());
    CHECK(loaded.voxel_count == 7);
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.images == ds.images);
    CHECK(loaded.voxels == ds.voxels);

    SECTION("written bytes are deterministic") {
        const auto path2 = tmp("capsdec_test_fmri2.csv");
        write_fmri_csv(path2.string(), ds);
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(s1 == s2);
        fs::remove(path2);
    }
    fs::remove(path);
}

TEST_CASE("fMRI CSV loader rejects malformed input") {
    const auto path = tmp("capsdec_test_bad.csv");
    SECTION("empty file") {
        std::ofstream(path).close();
        CHECK_THROWS_AS(load_fmri_csv(path.string()), FormatError);
    }
    SECTION("header only") {
        std::ofstream(path) << "label,pixels=4,voxels=2\n";
        CHECK_THROWS_AS(load_fmri_csv(path.string()), FormatError);
    }
    SECTION("row with too few values names the row") {
        std::ofstream(path) << "label,pixels=4,voxels=2\n6,0.1,0.2,0.3\n";
        try {
            load_fmri_csv(path.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("row 1") != std::string::npos);
        }
    }
    SECTION("bad label") {
        std::ofstream(path) << "label,pixels=4,voxels=1\n17,0.1,0.2,0.3,0.4,1.0\n";
        CHECK_THROWS_AS(load_fmri_csv(path.string()), FormatError);
    }
    SECTION("non-numeric field") {
        std::ofstream(path) << "label,pixels=4,voxels=1\n6,0.1,x,0.3,0.4,1.0\n";
        CHECK_THROWS_AS(load_fmri_csv(path.string()), FormatError);
    }
    fs::remove(path);
}

TEST_CASE("synthesize_fmri is deterministic and linear at sigma=0") {
    auto cfg = tiny_config();
    auto net = make_capsnet<float>(cfg, 7);
    auto stimuli = tiny_stimuli(cfg, 12, 3);

    SynthConfig sc;
    sc.signal_count = 5;
    sc.noise_sigma = 0.0;
    sc.seed = 42;
    sc.total_voxels = 20;

    auto ds1 = synthesize_fmri(net, stimuli, sc);
    auto ds2 = synthesize_fmri(net, stimuli, sc);
    CHECK(ds1.voxels == ds2.voxels);
    CHECK(ds1.signal_voxels == ds2.signal_voxels);
    REQUIRE(ds1.signal_voxels.size() == 5);
    CHECK(ds1.provenance.find("synthetic") == 0);

    SECTION("different seed moves the data") {
        auto sc2 = sc;
        sc2.seed = 43;
        auto other = synthesize_fmri(net, stimuli, sc2);
        CHECK(other.voxels != ds1.voxels);
    }
    SECTION("planted voxels fit the true-class capsule exactly") {
        // collect true-class capsule features
        std::vector<float> feats;
        net.set_parameters_requires_grad(false);
        for (int64_t i = 0; i < stimuli.size(); ++i) {
            std::vector<float> img(stimuli.image(i), stimuli.image(i) + cfg.pixels());
            auto out = forward(net, Tensor<float>::from_data({1, cfg.image_h, cfg.image_w}, img));
            const float* caps = out.capsules.data() + stimuli.labels[static_cast<size_t>(i)] * cfg.digit_dim;
            feats.insert(feats.end(), caps, caps + cfg.digit_dim);
        }
        auto enc = build_encoding(feats, ds1.voxels, ds1.size(), cfg.digit_dim, ds1.voxel_count, 5);
        std::set<int64_t> sel(enc.selected.begin(), enc.selected.end());
        for (int64_t v : ds1.signal_voxels) {
            CHECK(sel.count(v) == 1);
            CHECK(enc.r2[static_cast<size_t>(v)] == Catch::Approx(1.0).margin(1e-5));
        }
    }
}

TEST_CASE("kfold_split stratifies and is deterministic") {
    SECTION("100 samples, 10 folds, balanced 6/9 labels") {
        std::vector<int> labels(100);
        for (int i = 0; i < 100; ++i) labels[static_cast<size_t>(i)] = i < 50 ? 6 : 9;
        auto folds = kfold_split(100, 10, 5, labels);
        std::map<int, std::map<int, int>> per_fold;  // fold -> label -> count
        for (int i = 0; i < 100; ++i) per_fold[folds[static_cast<size_t>(i)]][labels[static_cast<size_t>(i)]]++;
        REQUIRE(per_fold.size() == 10);
        for (auto& [fold, counts] : per_fold) {
            CHECK(counts[6] == 5);
            CHECK(counts[9] == 5);
        }
        CHECK(folds == kfold_split(100, 10, 5, labels));
        CHECK(folds != kfold_split(100, 10, 6, labels));
    }
    SECTION("n = k gives singleton folds") {
        std::vector<int> labels(10, 1);
        auto folds = kfold_split(10, 10, 1, labels);
        std::set<int> seen(folds.begin(), folds.end());
        CHECK(seen.size() == 10);
    }
    SECTION("k > n raises") {
        std::vector<int> labels(3, 1);
        CHECK_THROWS_AS(kfold_split(3, 4, 1, labels), DomainError);
    }
}
