#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "capsdec/capsnet.hpp"
#include "capsdec/checkpoint.hpp"
#include "capsdec/gradcheck.hpp"
#include "oracles.hpp"

using namespace capsdec;

namespace {

// 9x9 images, 8 primary capsules (2 maps of 2x2, 3-D), 2 classes
CapsNetConfig tiny_config() {
    CapsNetConfig cfg;
    cfg.image_h = cfg.image_w = 9;
    cfg.conv1_channels = 4;
    cfg.kernel = 3;
    cfg.conv1_stride = 1;
    cfg.primary_maps = 2;
    cfg.primary_dim = 3;
    cfg.primary_stride = 3;
    cfg.num_classes = 2;
    cfg.digit_dim = 4;
    cfg.decoder_hidden1 = 16;
    cfg.decoder_hidden2 = 24;
    return cfg;
}

template <typename S>
ImageDataset<S> random_images(const CapsNetConfig& cfg, int64_t n, uint64_t seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    ImageDataset<S> ds;
    ds.height = cfg.image_h;
    ds.width = cfg.image_w;
    ds.pixels.resize(static_cast<size_t>(n * cfg.pixels()));
    for (auto& v : ds.pixels) v = static_cast<S>(dist(gen));
    ds.labels.resize(static_cast<size_t>(n));
    for (auto& l : ds.labels) l = static_cast<int>(gen() % cfg.num_classes);
    return ds;
}

}  // namespace

TEST_CASE("squash hand cases") {
    auto zero = squash(Tensor<float>::zeros({1, 4}));
    for (float v : zero.value()) CHECK(v == 0.0f);

    // unit-norm vector keeps its direction at half length
    auto unit = squash(Tensor<float>::from_data({1, 2}, {1.0f, 0.0f}));
    CHECK(unit.at(0, 0) == Catch::Approx(0.5).margin(1e-6));
    CHECK(unit.at(0, 1) == 0.0f);

    auto s = squash(Tensor<double>::from_data({1, 2}, {3.0, 4.0}));
    CHECK(s.at(0, 0) == Catch::Approx(25.0 / 26.0 * 0.6).epsilon(1e-12));
    CHECK(s.at(0, 1) == Catch::Approx(25.0 / 26.0 * 0.8).epsilon(1e-12));
}

TEST_CASE("squash preserves direction and bounds the norm") {
    std::mt19937 gen(2);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(6);
        for (auto& v : x) v = dist(gen);
        auto s = squash(Tensor<double>::from_data({1, 6}, x));
        double dot = 0.0, nx = 0.0, ns = 0.0;
        for (size_t i = 0; i < 6; ++i) {
            dot += x[i] * s.value()[i];
            nx += x[i] * x[i];
            ns += s.value()[i] * s.value()[i];
        }
        if (std::sqrt(nx) > 1e-8) {
            CHECK(dot / std::sqrt(nx * ns) == Catch::Approx(1.0).margin(1e-6));
            CHECK(std::sqrt(ns) >= 0.0);
            CHECK(std::sqrt(ns) < 1.0);
        }
    }
}

TEST_CASE("routing uniform cases") {
    SECTION("first iteration couples uniformly") {
        std::mt19937 gen(4);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        std::vector<double> uh(5 * 10 * 3);
        for (auto& v : uh) v = dist(gen);
        auto res = routing_batched(reshape(Tensor<double>::from_data({5, 10, 3}, uh), {1, 5, 10, 3}), 3);
        for (int64_t p = 0; p < 5; ++p)
            for (int64_t j = 0; j < 10; ++j)
                CHECK(res.couplings[0].at(0, p, j) == Catch::Approx(0.1).margin(1e-12));
    }
    SECTION("identical predictions keep coupling uniform at every iteration") {
        std::mt19937 gen(6);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        std::vector<double> one_row(4);
        for (auto& v : one_row) v = dist(gen);
        std::vector<double> uh;
        for (int p = 0; p < 6; ++p)
            for (int j = 0; j < 3; ++j) uh.insert(uh.end(), one_row.begin(), one_row.end());
        auto res = routing_batched(reshape(Tensor<double>::from_data({6, 3, 4}, uh), {1, 6, 3, 4}), 4);
        for (const auto& c : res.couplings)
            for (double v : c.value()) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-9));
    }
}

TEST_CASE("routing matches the hand-stepped scalar reference") {
    std::mt19937 gen(8);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int iterations = 1; iterations <= 5; ++iterations) {
        const int P = 4, J = 2, D = 3;
        std::vector<double> uh(static_cast<size_t>(P * J * D));
        for (auto& v : uh) v = dist(gen);

        std::vector<std::vector<double>> ref_couplings;
        auto ref_v = oracles::routing_reference(uh, P, J, D, iterations, &ref_couplings);

        auto out = routing(Tensor<double>::from_data({P, J, D}, uh), iterations);
        for (int j = 0; j < J; ++j)
            for (int d = 0; d < D; ++d)
                CHECK(out.capsules.at(j, d) == Catch::Approx(ref_v[static_cast<size_t>(j * D + d)]).margin(1e-10));

        // coupling rows are probability vectors at every iteration
        auto res = routing_batched(reshape(Tensor<double>::from_data({P, J, D}, uh), {1, P, J, D}), iterations);
        REQUIRE(res.couplings.size() == static_cast<size_t>(iterations));
        for (const auto& c : res.couplings)
            for (int p = 0; p < P; ++p) {
                double s = 0.0;
                for (int j = 0; j < J; ++j) {
                    CHECK(c.at(0, p, j) >= 0.0);
                    s += c.at(0, p, j);
                }
                CHECK(s == Catch::Approx(1.0).margin(1e-6));
            }
        // and agree with the reference couplings
        for (size_t t = 0; t < ref_couplings.size(); ++t)
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < J; ++j)
                    CHECK(res.couplings[t].at(0, p, j) ==
                          Catch::Approx(ref_couplings[t][static_cast<size_t>(p * J + j)]).margin(1e-10));
    }
}

TEST_CASE("forward contract on the tiny network") {
    auto cfg = tiny_config();
    auto model = make_capsnet<float>(cfg, 99);
    REQUIRE(cfg.primary_capsules() == 8);

    SECTION("lengths live in [0,1) for a random image") {
        std::mt19937 gen(10);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        std::vector<float> img(static_cast<size_t>(cfg.pixels()));
        for (auto& v : img) v = dist(gen);
        auto out = forward(model, Tensor<float>::from_data({1, cfg.image_h, cfg.image_w}, img));
        CHECK(out.capsules.shape() == Shape{cfg.num_classes, cfg.digit_dim});
        for (int64_t j = 0; j < cfg.num_classes; ++j) {
            CHECK(out.lengths.data()[j] >= 0.0f);
            CHECK(out.lengths.data()[j] < 1.0f);
            double n2 = 0.0;
            for (int64_t d = 0; d < cfg.digit_dim; ++d)
                n2 += static_cast<double>(out.capsules.at(j, d)) * static_cast<double>(out.capsules.at(j, d));
            CHECK(out.lengths.data()[j] == Catch::Approx(std::sqrt(n2)).margin(1e-6));
        }
    }
    SECTION("all-zero image with zero biases gives zero lengths") {
        auto out = forward(model, Tensor<float>::zeros({1, cfg.image_h, cfg.image_w}));
        for (int64_t j = 0; j < cfg.num_classes; ++j) CHECK(out.lengths.data()[j] == 0.0f);
    }
    SECTION("wrong input shape raises") {
        CHECK_THROWS_AS(forward(model, Tensor<float>::zeros({1, 5, 5})), DimensionError);
    }
}

TEST_CASE("margin loss hand cases") {
    CapsNetConfig cfg;  // m+=0.9, m-=0.1, lambda=0.5
    SECTION("inactive hinges give zero") {
        std::vector<float> lengths(10, 0.1f);
        lengths[4] = 0.9f;
        CHECK(margin_loss(Tensor<float>::from_data({10}, lengths), 4, cfg).item() == 0.0f);
    }
    SECTION("all-zero lengths leave only the present-class hinge") {
        CHECK(margin_loss(Tensor<float>::zeros({10}), 7, cfg).item() == Catch::Approx(0.81).epsilon(1e-6));
    }
    SECTION("uniform 0.5 lengths") {
        std::vector<float> lengths(10, 0.5f);
        CHECK(margin_loss(Tensor<float>::from_data({10}, lengths), 3, cfg).item() ==
              Catch::Approx(0.88).epsilon(1e-6));
    }
    SECTION("label out of range raises") {
        CHECK_THROWS_AS(margin_loss(Tensor<float>::zeros({10}), 10, cfg), DomainError);
        CHECK_THROWS_AS(margin_loss(Tensor<float>::zeros({10}), -1, cfg), DomainError);
    }
}

TEST_CASE("margin loss of a tiny routing head passes the gradient check") {
    std::mt19937 gen(12);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const int P = 6, J = 2, D = 4;
    std::vector<double> uh(static_cast<size_t>(P * J * D));
    for (auto& v : uh) v = dist(gen);
    auto x = Tensor<double>::from_data({P, J, D}, uh);
    CapsNetConfig cfg = tiny_config();
    auto f = [&](Tensor<double>& t) {
        auto out = routing(t, 3);
        return margin_loss(out.lengths, 1, cfg);
    };
    CHECK(grad_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("decode contract") {
    auto cfg = tiny_config();
    auto model = make_capsnet<float>(cfg, 5);
    SECTION("zero capsules give the constant sigmoid(bias) image") {
        auto img = decode(model, Tensor<float>::zeros({cfg.num_classes, cfg.digit_dim}), 1);
        for (float v : img.value()) CHECK(v == 0.5f);  // biases start at zero
    }
    SECTION("outputs stay inside (0,1)") {
        std::mt19937 gen(14);
        std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
        std::vector<float> caps(static_cast<size_t>(cfg.num_classes * cfg.digit_dim));
        for (auto& v : caps) v = dist(gen);
        auto img = decode(model, Tensor<float>::from_data({cfg.num_classes, cfg.digit_dim}, caps), 0);
        for (float v : img.value()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
    SECTION("selected class out of range raises") {
        CHECK_THROWS_AS(decode(model, Tensor<float>::zeros({cfg.num_classes, cfg.digit_dim}), 7), DomainError);
    }
}

TEST_CASE("overall loss composition") {
    auto cfg = tiny_config();
    std::mt19937 gen(16);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> img(static_cast<size_t>(cfg.pixels()));
    for (auto& v : img) v = dist(gen);
    auto image = Tensor<float>::from_data({1, cfg.image_h, cfg.image_w}, img);

    SECTION("mu=0 reduces to the margin loss") {
        auto cfg0 = cfg;
        cfg0.mu = 0.0;
        auto model = make_capsnet<float>(cfg0, 21);
        auto v = digit_caps_batched(model, reshape(image, {1, 1, cfg.image_h, cfg.image_w}));
        auto margin = margin_loss_batched(vec_norm(v), {1}, cfg0);
        CHECK(overall_loss(model, image, 1).item() == margin.item());
    }
    SECTION("equals margin plus mu times the per-pixel-mean reconstruction error") {
        auto model = make_capsnet<float>(cfg, 21);
        auto v = digit_caps_batched(model, reshape(image, {1, 1, cfg.image_h, cfg.image_w}));
        const double margin = margin_loss_batched(vec_norm(v), {1}, cfg).item();
        auto recon = decode_batched(model, v, {1});
        double se = 0.0;
        for (int64_t i = 0; i < cfg.pixels(); ++i) {
            const double d = static_cast<double>(recon.data()[i]) - static_cast<double>(img[static_cast<size_t>(i)]);
            se += d * d;
        }
        const double expected = margin + cfg.mu * se / static_cast<double>(cfg.pixels());
        CHECK(overall_loss(model, image, 1).item() == Catch::Approx(expected).epsilon(1e-5));
    }
}

TEST_CASE("overall loss gradients flow through the whole network") {
    auto cfg = tiny_config();
    auto model = make_capsnet<double>(cfg, 31);
    std::mt19937 gen(18);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<double> img(static_cast<size_t>(cfg.pixels()));
    for (auto& v : img) v = dist(gen);
    auto image = Tensor<double>::from_data({1, cfg.image_h, cfg.image_w}, img);

    auto f_routing = [&](Tensor<double>&) { return overall_loss(model, image, 0); };
    CHECK(grad_check(f_routing, model.w_routing, 1e-5) < 1e-4);
    CHECK(grad_check(f_routing, model.conv1_kernels, 1e-5) < 1e-4);
}

TEST_CASE("training contract on the tiny network") {
    auto cfg = tiny_config();
    auto data = random_images<float>(cfg, 24, 77);

    SECTION("zero epochs keep the initial parameters") {
        auto m1 = make_capsnet<float>(cfg, 3);
        auto m2 = make_capsnet<float>(cfg, 3);
        auto hist = train(m1, data, 0, 10, 5);
        CHECK(hist.empty());
        CHECK(m1.w_routing.value() == m2.w_routing.value());
    }
    SECTION("same seed gives an identical history and parameters") {
        auto m1 = make_capsnet<float>(cfg, 3);
        auto m2 = make_capsnet<float>(cfg, 3);
        auto h1 = train(m1, data, 2, 8, 5);
        auto h2 = train(m2, data, 2, 8, 5);
        CHECK(h1 == h2);
        CHECK(m1.primary_kernels.value() == m2.primary_kernels.value());
        CHECK(m1.dec_w3.value() == m2.dec_w3.value());
    }
    SECTION("empty dataset raises") {
        ImageDataset<float> empty;
        empty.height = cfg.image_h;
        empty.width = cfg.image_w;
        auto m = make_capsnet<float>(cfg, 3);
        CHECK_THROWS_AS(train(m, empty, 1, 10, 5), DomainError);
    }
    SECTION("loss decreases over repeated Adam steps on a fixed subset") {
        auto m = make_capsnet<float>(cfg, 3);
        auto subset = random_images<float>(cfg, 100, 91);
        std::vector<double> losses;
        for (int step = 0; step < 50; ++step) {
            auto h = train(m, subset, 1, 100, 5);  // one full-batch step per call
            losses.push_back(h[0]);
        }
        CHECK(losses.back() < losses.front());
    }
}

TEST_CASE("classification picks the longest capsule with low-index ties") {
    std::vector<float> lengths = {0.1f, 0.1f, 0.1f, 0.1f, 0.1f, 0.1f, 0.95f, 0.1f, 0.1f, 0.1f};
    CHECK(classify_lengths(Tensor<float>::from_data({10}, lengths)) == 6);
    std::vector<float> tie(10, 0.1f);
    tie[2] = 0.7f;
    tie[7] = 0.7f;
    CHECK(classify_lengths(Tensor<float>::from_data({10}, tie)) == 2);
}

TEST_CASE("checkpoint round-trips the capsule network bit-exactly") {
    namespace fs = std::filesystem;
    auto cfg = tiny_config();
    auto model = make_capsnet<float>(cfg, 123);
    auto data = random_images<float>(cfg, 12, 55);
    train(model, data, 1, 6, 9);

    const auto path = fs::temp_directory_path() / "capsdec_test_capsnet.ckpt";
    save_capsnet(path.string(), model);
    auto loaded = load_capsnet(path.string());
    CHECK(loaded.seed == model.seed);
    CHECK(loaded.trained_epochs == model.trained_epochs);
    CHECK(loaded.cfg.num_classes == cfg.num_classes);
    CHECK(loaded.cfg.mu == cfg.mu);
    auto a = model.named_parameters();
    auto b = loaded.named_parameters();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.value() == b[i].second.value());

    // saving the loaded model reproduces the file byte-for-byte
    const auto path2 = fs::temp_directory_path() / "capsdec_test_capsnet2.ckpt";
    save_capsnet(path2.string(), loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("decoder is sensitive to capsule perturbations") {
    auto cfg = tiny_config();
    auto model = make_capsnet<float>(cfg, 42);
    auto data = random_images<float>(cfg, 30, 13);
    train(model, data, 2, 10, 7);

    std::mt19937 gen(20);
    std::uniform_real_distribution<float> dist(-0.3f, 0.3f);
    std::vector<float> caps(static_cast<size_t>(cfg.num_classes * cfg.digit_dim));
    for (auto& v : caps) v = dist(gen);
    auto base = decode(model, Tensor<float>::from_data({cfg.num_classes, cfg.digit_dim}, caps), 0);
    for (float delta : {0.05f, -0.05f}) {
        auto perturbed = caps;
        perturbed[2] += delta;
        auto img = decode(model, Tensor<float>::from_data({cfg.num_classes, cfg.digit_dim}, perturbed), 0);
        bool differs = false;
        for (int64_t i = 0; i < cfg.pixels(); ++i) {
            CHECK(img.data()[i] > 0.0f);
            CHECK(img.data()[i] < 1.0f);
            differs = differs || img.data()[i] != base.data()[i];
        }
        CHECK(differs);
    }
}
