#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capsdec/errors.hpp"

namespace capsdec {

struct MetricTriple {
    double mse = 0.0;
    double pcc = 0.0;
    double ssim = 0.0;
};

// Mean squared error over pixels.
inline double mse(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw DimensionError("mse: size mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.empty()) throw DomainError("mse: empty input");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// Sample Pearson correlation over flattened pixels.
inline double pcc(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw DimensionError("pcc: size mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    const size_t n = a.size();
    if (n < 2) throw DomainError("pcc: need at least 2 values");
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += static_cast<double>(a[i]);
        mb += static_cast<double>(b[i]);
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double da = static_cast<double>(a[i]) - ma;
        const double db = static_cast<double>(b[i]) - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) throw NumericError("pcc: undefined for constant input");
    return sab / std::sqrt(saa * sbb);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size) * static_cast<size_t>(size));
    const double c = (size - 1) / 2.0;
    double total = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - c, dx = x - c;
            const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            w[static_cast<size_t>(y * size + x)] = v;
            total += v;
        }
    for (auto& v : w) v /= total;
    return w;
}

}  // namespace detail

// Windowed SSIM for images in [0,1] (dynamic range 1): Gaussian window,
// C1=(0.01)^2, C2=(0.03)^2, averaged over valid window positions only.
inline double ssim(const std::vector<float>& a, const std::vector<float>& b, int64_t h, int64_t w,
                   int window = 7, double sigma = 1.5) {
    if (a.size() != b.size() || static_cast<int64_t>(a.size()) != h * w)
        throw DimensionError("ssim: images must both be " + std::to_string(h) + "x" + std::to_string(w));
    if (window > h || window > w)
        throw DimensionError("ssim: window " + std::to_string(window) + " larger than image " +
                             std::to_string(h) + "x" + std::to_string(w));
    const auto win = detail::gaussian_window(window, sigma);
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t oy = 0; oy + window <= h; ++oy)
        for (int64_t ox = 0; ox + window <= w; ++ox) {
            double mu1 = 0.0, mu2 = 0.0, s11 = 0.0, s22 = 0.0, s12 = 0.0;
            for (int wy = 0; wy < window; ++wy)
                for (int wx = 0; wx < window; ++wx) {
                    const double g = win[static_cast<size_t>(wy * window + wx)];
                    const double pa = static_cast<double>(a[static_cast<size_t>((oy + wy) * w + ox + wx)]);
                    const double pb = static_cast<double>(b[static_cast<size_t>((oy + wy) * w + ox + wx)]);
                    mu1 += g * pa;
                    mu2 += g * pb;
                    s11 += g * pa * pa;
                    s22 += g * pb * pb;
                    s12 += g * (pa * pb);  // grouped so ssim(a,b) == ssim(b,a) bitwise
                }
            const double var1 = s11 - mu1 * mu1;
            const double var2 = s22 - mu2 * mu2;
            const double cov = s12 - mu1 * mu2;
            total += ((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)) /
                     ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

inline MetricTriple compute_metrics(const std::vector<float>& reference, const std::vector<float>& candidate,
                                    int64_t h, int64_t w, int ssim_window = 7, double ssim_sigma = 1.5) {
    MetricTriple t;
    t.mse = mse(reference, candidate);
    t.pcc = pcc(reference, candidate);
    t.ssim = ssim(reference, candidate, h, w, ssim_window, ssim_sigma);
    return t;
}

}  // namespace capsdec
