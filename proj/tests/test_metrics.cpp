#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "capsdec/metrics.hpp"
#include "oracles.hpp"

using namespace capsdec;

namespace {

std::vector<float> random_image(int64_t n, uint64_t seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> img(static_cast<size_t>(n));
    for (auto& v : img) v = dist(gen);
    return img;
}

// blocky digit-like shape: bright stroke on dark background
std::vector<float> stroke_image(int64_t h, int64_t w) {
    std::vector<float> img(static_cast<size_t>(h * w), 0.05f);
    for (int64_t y = 4; y < h - 4; ++y) img[static_cast<size_t>(y * w + w / 2)] = 0.95f;
    for (int64_t x = 6; x < w - 6; ++x) img[static_cast<size_t>(6 * w + x)] = 0.95f;
    return img;
}

}  // namespace

TEST_CASE("mse hand cases") {
    CHECK(mse({0.5f, 0.25f}, {0.5f, 0.25f}) == 0.0);
    CHECK(mse(std::vector<float>(4, 0.0f), std::vector<float>(4, 1.0f)) == 1.0);
    CHECK(mse({0.0f, 0.5f}, {0.5f, 0.5f}) == Catch::Approx(0.125).epsilon(1e-12));
    CHECK_THROWS_AS(mse({0.0f}, {0.0f, 1.0f}), DimensionError);
}

TEST_CASE("mse is zero only for identical images") {
    auto a = random_image(64, 1);
    auto b = a;
    CHECK(mse(a, b) == 0.0);
    b[10] += 0.001f;
    CHECK(mse(a, b) > 0.0);
}

TEST_CASE("pcc hand cases") {
    auto a = random_image(32, 2);
    std::vector<float> b(a);
    for (auto& v : b) v = 2.0f * v + 0.1f;
    CHECK(pcc(a, b) == Catch::Approx(1.0).margin(1e-9));
    for (size_t i = 0; i < b.size(); ++i) b[i] = -a[i] + 1.0f;
    CHECK(pcc(a, b) == Catch::Approx(-1.0).margin(1e-9));
    CHECK(pcc({0, 1, 2, 3}, {0, 1, 2, 4}) == Catch::Approx(6.5 / std::sqrt(43.75)).epsilon(1e-12));
    CHECK_THROWS_AS(pcc({1.0f, 1.0f, 1.0f}, {0.0f, 1.0f, 2.0f}), NumericError);
}

TEST_CASE("pcc is invariant under positive affine transforms") {
    std::mt19937 gen(3);
    std::uniform_real_distribution<float> scale(0.1f, 5.0f), shift(-2.0f, 2.0f);
    auto a = random_image(100, 4);
    auto b = random_image(100, 5);
    const double base = pcc(a, b);
    for (int trial = 0; trial < 10; ++trial) {
        auto a2 = a;
        auto b2 = b;
        const float sa = scale(gen), oa = shift(gen), sb = scale(gen), ob = shift(gen);
        for (auto& v : a2) v = sa * v + oa;
        for (auto& v : b2) v = sb * v + ob;
        CHECK(pcc(a2, b2) == Catch::Approx(base).margin(1e-9));
    }
}

TEST_CASE("ssim identity, symmetry and bounds") {
    auto a = random_image(28 * 28, 6);
    CHECK(ssim(a, a, 28, 28) == Catch::Approx(1.0).margin(1e-12));
    auto b = random_image(28 * 28, 7);
    const double ab = ssim(a, b, 28, 28);
    const double ba = ssim(b, a, 28, 28);
    CHECK(ab == ba);  // exact, the formula is symmetric term by term
    CHECK(std::abs(ab) <= 1.0 + 1e-9);
}

TEST_CASE("ssim matches the brute-force window oracle") {
    for (uint64_t seed : {10u, 11u, 12u}) {
        auto a = random_image(28 * 28, seed);
        auto b = random_image(28 * 28, seed + 100);
        const double mine = ssim(a, b, 28, 28, 7, 1.5);
        const double ref = oracles::ssim_reference(a, b, 28, 28, 7, 1.5);
        CHECK(mine == Catch::Approx(ref).margin(1e-8));
        // the configurable window must also agree
        const double mine11 = ssim(a, b, 28, 28, 11, 1.5);
        const double ref11 = oracles::ssim_reference(a, b, 28, 28, 11, 1.5);
        CHECK(mine11 == Catch::Approx(ref11).margin(1e-8));
    }
}

TEST_CASE("ssim of an inverted stroke image is negative") {
    auto a = stroke_image(28, 28);
    std::vector<float> inv(a);
    for (auto& v : inv) v = 1.0f - v;
    CHECK(ssim(a, inv, 28, 28) < 0.0);
}

TEST_CASE("ssim rejects windows larger than the image") {
    auto a = random_image(5 * 5, 13);
    CHECK_THROWS_AS(ssim(a, a, 5, 5, 7, 1.5), DimensionError);
}

TEST_CASE("compute_metrics bundles all three") {
    auto a = random_image(28 * 28, 14);
    auto b = random_image(28 * 28, 15);
    auto t = compute_metrics(a, b, 28, 28);
    CHECK(t.mse == mse(a, b));
    CHECK(t.pcc == pcc(a, b));
    CHECK(t.ssim == ssim(a, b, 28, 28));
    CHECK(t.mse >= 0.0);
    CHECK(std::abs(t.pcc) <= 1.0 + 1e-9);
    CHECK(std::abs(t.ssim) <= 1.0 + 1e-9);
}
