#pragma once

// Independent scalar reference implementations used as test oracles. These
// deliberately avoid the library's tensor ops and (where possible) take a
// different algebraic route than the code under test.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace oracles {

// Hand-stepped dynamic routing over u_hat[P x J x D] in plain doubles:
// logits start at zero; per iteration c = softmax_j(b), s_j = sum_i c_ij
// u_hat_ij, v_j = squash(s_j), b_ij += u_hat_ij . v_j. Returns the final v
// and, when requested, the coupling coefficients of every iteration.
inline std::vector<double> routing_reference(const std::vector<double>& u_hat, int P, int J, int D,
                                             int iterations,
                                             std::vector<std::vector<double>>* couplings_out = nullptr) {
    std::vector<double> b(static_cast<size_t>(P) * J, 0.0);
    std::vector<double> v(static_cast<size_t>(J) * D, 0.0);
    for (int t = 0; t < iterations; ++t) {
        std::vector<double> c(static_cast<size_t>(P) * J);
        for (int p = 0; p < P; ++p) {
            double mx = b[static_cast<size_t>(p) * J];
            for (int j = 1; j < J; ++j) mx = std::max(mx, b[static_cast<size_t>(p) * J + j]);
            double denom = 0.0;
            for (int j = 0; j < J; ++j) denom += std::exp(b[static_cast<size_t>(p) * J + j] - mx);
            for (int j = 0; j < J; ++j)
                c[static_cast<size_t>(p) * J + j] = std::exp(b[static_cast<size_t>(p) * J + j] - mx) / denom;
        }
        if (couplings_out) couplings_out->push_back(c);
        for (int j = 0; j < J; ++j) {
            std::vector<double> s(static_cast<size_t>(D), 0.0);
            for (int p = 0; p < P; ++p)
                for (int d = 0; d < D; ++d)
                    s[static_cast<size_t>(d)] += c[static_cast<size_t>(p) * J + j] *
                                                 u_hat[(static_cast<size_t>(p) * J + j) * D + static_cast<size_t>(d)];
            double n2 = 0.0;
            for (int d = 0; d < D; ++d) n2 += s[static_cast<size_t>(d)] * s[static_cast<size_t>(d)];
            const double norm = std::sqrt(n2);
            const double scale = norm > 0.0 ? (n2 / (1.0 + n2)) / norm : 0.0;
            for (int d = 0; d < D; ++d) v[static_cast<size_t>(j) * D + d] = s[static_cast<size_t>(d)] * scale;
        }
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < J; ++j) {
                double dot = 0.0;
                for (int d = 0; d < D; ++d)
                    dot += u_hat[(static_cast<size_t>(p) * J + j) * D + static_cast<size_t>(d)] *
                           v[static_cast<size_t>(j) * D + d];
                b[static_cast<size_t>(p) * J + j] += dot;
            }
    }
    return v;
}

// Gauss-Jordan solve of a dense symmetric system, no jitter. Used as the
// brute-force pseudo-inverse route for the least-squares oracle.
inline std::vector<double> gauss_solve(std::vector<double> a, std::vector<double> rhs, int n) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[static_cast<size_t>(r) * n + col]) > std::abs(a[static_cast<size_t>(pivot) * n + col]))
                pivot = r;
        if (std::abs(a[static_cast<size_t>(pivot) * n + col]) < 1e-12)
            throw std::runtime_error("gauss_solve: singular matrix");
        if (pivot != col) {
            for (int j = 0; j < n; ++j)
                std::swap(a[static_cast<size_t>(col) * n + j], a[static_cast<size_t>(pivot) * n + j]);
            std::swap(rhs[static_cast<size_t>(col)], rhs[static_cast<size_t>(pivot)]);
        }
        const double d = a[static_cast<size_t>(col) * n + col];
        for (int j = 0; j < n; ++j) a[static_cast<size_t>(col) * n + j] /= d;
        rhs[static_cast<size_t>(col)] /= d;
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[static_cast<size_t>(r) * n + col];
            if (f == 0.0) continue;
            for (int j = 0; j < n; ++j)
                a[static_cast<size_t>(r) * n + j] -= f * a[static_cast<size_t>(col) * n + j];
            rhs[static_cast<size_t>(r)] -= f * rhs[static_cast<size_t>(col)];
        }
    }
    return rhs;
}

// Ordinary least squares with intercept via explicit normal equations and
// Gauss-Jordan, independent of the library's Cholesky path.
inline std::vector<double> ols_reference(const std::vector<double>& features, const std::vector<double>& activity,
                                         int n, int f) {
    const int p = f + 1;
    std::vector<double> g(static_cast<size_t>(p) * p, 0.0), rhs(static_cast<size_t>(p), 0.0);
    for (int s = 0; s < n; ++s) {
        std::vector<double> row(static_cast<size_t>(p));
        for (int j = 0; j < f; ++j) row[static_cast<size_t>(j)] = features[static_cast<size_t>(s) * f + j];
        row[static_cast<size_t>(f)] = 1.0;
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < p; ++j)
                g[static_cast<size_t>(i) * p + j] += row[static_cast<size_t>(i)] * row[static_cast<size_t>(j)];
            rhs[static_cast<size_t>(i)] += row[static_cast<size_t>(i)] * activity[static_cast<size_t>(s)];
        }
    }
    return gauss_solve(std::move(g), std::move(rhs), p);
}

// Per-window SSIM with two-pass centered moments (the implementation uses
// the E[x^2]-mu^2 form), Gaussian window, valid positions.
inline double ssim_reference(const std::vector<float>& a, const std::vector<float>& b, int h, int w,
                             int window, double sigma) {
    std::vector<double> win(static_cast<size_t>(window) * window);
    const double c = (window - 1) / 2.0;
    double wsum = 0.0;
    for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x) {
            const double v = std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) / (2.0 * sigma * sigma));
            win[static_cast<size_t>(y) * window + x] = v;
            wsum += v;
        }
    for (auto& v : win) v /= wsum;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    int count = 0;
    for (int oy = 0; oy + window <= h; ++oy)
        for (int ox = 0; ox + window <= w; ++ox) {
            double mu1 = 0.0, mu2 = 0.0;
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x) {
                    const double g = win[static_cast<size_t>(y) * window + x];
                    mu1 += g * a[static_cast<size_t>(oy + y) * w + ox + x];
                    mu2 += g * b[static_cast<size_t>(oy + y) * w + ox + x];
                }
            double v1 = 0.0, v2 = 0.0, cov = 0.0;
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x) {
                    const double g = win[static_cast<size_t>(y) * window + x];
                    const double da = a[static_cast<size_t>(oy + y) * w + ox + x] - mu1;
                    const double db = b[static_cast<size_t>(oy + y) * w + ox + x] - mu2;
                    v1 += g * da * da;
                    v2 += g * db * db;
                    cov += g * da * db;
                }
            total += ((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)) /
                     ((mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2));
            ++count;
        }
    return total / count;
}

}  // namespace oracles
