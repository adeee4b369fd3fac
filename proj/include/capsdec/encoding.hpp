#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "capsdec/checkpoint.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/parallel.hpp"

namespace capsdec {

// Per-voxel linear encoding: 16 capsule coefficients plus an intercept, a
// training-fit R^2 per voxel, and the top-k voxel indices by R^2.
struct EncodingModel {
    int64_t voxel_count = 0;
    int64_t feature_dim = 16;
    std::vector<float> weights;     // V x (feature_dim + 1), intercept last
    std::vector<float> r2;          // V; -1 marks a degenerate (constant) voxel
    std::vector<int64_t> selected;  // k indices, descending r2, ties to lower index
};

namespace detail {

// Cholesky solve of the (jittered) SPD normal equations, in double.
inline std::vector<double> cholesky_solve(std::vector<double> g, std::vector<double> rhs, int64_t n) {
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t k = 0; k < j; ++k) {
            const double l = g[static_cast<size_t>(j * n + k)];
            for (int64_t i = j; i < n; ++i) g[static_cast<size_t>(i * n + j)] -= g[static_cast<size_t>(i * n + k)] * l;
        }
        const double d = g[static_cast<size_t>(j * n + j)];
        if (d <= 0.0) throw NumericError("degenerate fit: normal equations not positive definite");
        const double root = std::sqrt(d);
        for (int64_t i = j; i < n; ++i) g[static_cast<size_t>(i * n + j)] /= root;
    }
    for (int64_t i = 0; i < n; ++i) {  // forward solve L y = rhs
        double acc = rhs[static_cast<size_t>(i)];
        for (int64_t k = 0; k < i; ++k) acc -= g[static_cast<size_t>(i * n + k)] * rhs[static_cast<size_t>(k)];
        rhs[static_cast<size_t>(i)] = acc / g[static_cast<size_t>(i * n + i)];
    }
    for (int64_t i = n - 1; i >= 0; --i) {  // back solve L^T x = y
        double acc = rhs[static_cast<size_t>(i)];
        for (int64_t k = i + 1; k < n; ++k) acc -= g[static_cast<size_t>(k * n + i)] * rhs[static_cast<size_t>(k)];
        rhs[static_cast<size_t>(i)] = acc / g[static_cast<size_t>(i * n + i)];
    }
    return rhs;
}

// Gram matrix of the intercept-augmented design [X | 1], with ridge jitter.
inline std::vector<double> augmented_gram(const std::vector<double>& x, int64_t n, int64_t f, double jitter) {
    const int64_t p = f + 1;
    std::vector<double> g(static_cast<size_t>(p * p), 0.0);
    for (int64_t s = 0; s < n; ++s) {
        const double* row = x.data() + s * f;
        for (int64_t i = 0; i < f; ++i) {
            for (int64_t j = 0; j <= i; ++j) g[static_cast<size_t>(i * p + j)] += row[i] * row[j];
            g[static_cast<size_t>(f * p + i)] += row[i];
        }
    }
    g[static_cast<size_t>(f * p + f)] = static_cast<double>(n);
    for (int64_t i = 0; i < p; ++i)
        for (int64_t j = i + 1; j < p; ++j) g[static_cast<size_t>(i * p + j)] = g[static_cast<size_t>(j * p + i)];
    for (int64_t i = 0; i < p; ++i) g[static_cast<size_t>(i * p + i)] += jitter;
    return g;
}

}  // namespace detail

// Ordinary least squares with intercept via normal equations (ridge jitter
// 1e-8 on the Gram diagonal). features is N x F row-major; the result holds
// F coefficients followed by the intercept.
inline std::vector<double> fit_voxel(const std::vector<double>& features, const std::vector<double>& activity,
                                     int64_t feature_dim = 16) {
    const int64_t f = feature_dim;
    if (f < 1) throw DomainError("fit_voxel: feature_dim must be >= 1");
    if (features.size() % static_cast<size_t>(f) != 0)
        throw DimensionError("fit_voxel: feature matrix size " + std::to_string(features.size()) +
                             " is not a multiple of " + std::to_string(f));
    const int64_t n = static_cast<int64_t>(features.size()) / f;
    if (static_cast<int64_t>(activity.size()) != n)
        throw DimensionError("fit_voxel: " + std::to_string(activity.size()) + " activities for " +
                             std::to_string(n) + " feature rows");
    if (n < 2) throw NumericError("degenerate fit: need at least 2 samples");

    bool any_varying = false;
    for (int64_t j = 0; j < f && !any_varying; ++j)
        for (int64_t s = 1; s < n; ++s)
            if (features[static_cast<size_t>(s * f + j)] != features[static_cast<size_t>(j)]) {
                any_varying = true;
                break;
            }
    if (!any_varying) throw NumericError("degenerate fit: constant feature matrix has no unique solution");

    auto gram = detail::augmented_gram(features, n, f, 1e-8);
    std::vector<double> rhs(static_cast<size_t>(f + 1), 0.0);
    for (int64_t s = 0; s < n; ++s) {
        const double y = activity[static_cast<size_t>(s)];
        for (int64_t j = 0; j < f; ++j) rhs[static_cast<size_t>(j)] += features[static_cast<size_t>(s * f + j)] * y;
        rhs[static_cast<size_t>(f)] += y;
    }
    return detail::cholesky_solve(std::move(gram), std::move(rhs), f + 1);
}

// 1 - SS_res/SS_tot with SS_tot about the mean of `actual`.
inline double r_squared(const std::vector<double>& predicted, const std::vector<double>& actual) {
    if (predicted.size() != actual.size())
        throw DimensionError("r_squared: size mismatch " + std::to_string(predicted.size()) + " vs " +
                             std::to_string(actual.size()));
    const size_t n = actual.size();
    if (n < 2) throw DomainError("r_squared: need at least 2 samples");
    double mean = 0.0;
    for (double y : actual) mean += y;
    mean /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double r = actual[i] - predicted[i];
        const double d = actual[i] - mean;
        ss_res += r * r;
        ss_tot += d * d;
    }
    if (ss_tot == 0.0) throw NumericError("r_squared: actual values are constant, variance undefined");
    return 1.0 - ss_res / ss_tot;
}

// Fits every voxel independently on the training pairs (capsule features
// N x F, voxel activity N x V), scores the training fit with R^2, and keeps
// the k best voxels. Each voxel's activity is z-scored before fitting; a
// zero-variance voxel gets r2 = -1 and is never selected ahead of a real fit.
inline EncodingModel build_encoding(const std::vector<float>& features, const std::vector<float>& voxels,
                                    int64_t n_samples, int64_t feature_dim, int64_t voxel_count, int64_t k) {
    if (n_samples < 2) throw DomainError("build_encoding: need at least 2 samples");
    if (k < 1 || k > voxel_count)
        throw DomainError("build_encoding: k=" + std::to_string(k) + " outside 1.." + std::to_string(voxel_count));
    if (static_cast<int64_t>(features.size()) != n_samples * feature_dim ||
        static_cast<int64_t>(voxels.size()) != n_samples * voxel_count)
        throw DimensionError("build_encoding: feature/voxel matrix sizes do not match the sample count");

    EncodingModel model;
    model.voxel_count = voxel_count;
    model.feature_dim = feature_dim;
    model.weights.assign(static_cast<size_t>(voxel_count * (feature_dim + 1)), 0.0f);
    model.r2.assign(static_cast<size_t>(voxel_count), -1.0f);

    std::vector<double> x(features.begin(), features.end());
    const auto gram = detail::augmented_gram(x, n_samples, feature_dim, 1e-8);
    const int64_t p = feature_dim + 1;

    parallel_for(0, voxel_count, [&](int64_t lo, int64_t hi) {
        std::vector<double> y(static_cast<size_t>(n_samples));
        std::vector<double> pred(static_cast<size_t>(n_samples));
        for (int64_t v = lo; v < hi; ++v) {
            double mean = 0.0;
            for (int64_t s = 0; s < n_samples; ++s) mean += static_cast<double>(voxels[static_cast<size_t>(s * voxel_count + v)]);
            mean /= static_cast<double>(n_samples);
            double var = 0.0;
            for (int64_t s = 0; s < n_samples; ++s) {
                const double d = static_cast<double>(voxels[static_cast<size_t>(s * voxel_count + v)]) - mean;
                var += d * d;
            }
            if (var == 0.0) continue;  // constant voxel: r2 stays -1
            const double stddev = std::sqrt(var / static_cast<double>(n_samples));
            for (int64_t s = 0; s < n_samples; ++s)
                y[static_cast<size_t>(s)] =
                    (static_cast<double>(voxels[static_cast<size_t>(s * voxel_count + v)]) - mean) / stddev;

            std::vector<double> rhs(static_cast<size_t>(p), 0.0);
            for (int64_t s = 0; s < n_samples; ++s) {
                const double ys = y[static_cast<size_t>(s)];
                for (int64_t j = 0; j < feature_dim; ++j)
                    rhs[static_cast<size_t>(j)] += x[static_cast<size_t>(s * feature_dim + j)] * ys;
                rhs[static_cast<size_t>(feature_dim)] += ys;
            }
            const auto w = detail::cholesky_solve(gram, std::move(rhs), p);
            for (int64_t s = 0; s < n_samples; ++s) {
                double acc = w[static_cast<size_t>(feature_dim)];
                for (int64_t j = 0; j < feature_dim; ++j)
                    acc += w[static_cast<size_t>(j)] * x[static_cast<size_t>(s * feature_dim + j)];
                pred[static_cast<size_t>(s)] = acc;
            }
            model.r2[static_cast<size_t>(v)] = static_cast<float>(r_squared(pred, y));
            for (int64_t j = 0; j < p; ++j)
                model.weights[static_cast<size_t>(v * p + j)] = static_cast<float>(w[static_cast<size_t>(j)]);
        }
    });

    std::vector<int64_t> order(static_cast<size_t>(voxel_count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (model.r2[static_cast<size_t>(a)] != model.r2[static_cast<size_t>(b)])
            return model.r2[static_cast<size_t>(a)] > model.r2[static_cast<size_t>(b)];
        return a < b;
    });
    model.selected.assign(order.begin(), order.begin() + k);
    return model;
}

// ---- serialization -----------------------------------------------------------

inline void save_encoding(const std::string& path, const EncodingModel& m) {
    Checkpoint ckpt;
    ckpt.kind = "encoding";
    ckpt.put_int("voxel_count", m.voxel_count);
    ckpt.put_int("feature_dim", m.feature_dim);
    ckpt.put_int("k", static_cast<int64_t>(m.selected.size()));
    ckpt.tensors.push_back({"weights", {m.voxel_count, m.feature_dim + 1}, m.weights});
    ckpt.tensors.push_back({"r2", {m.voxel_count}, m.r2});
    std::vector<float> sel(m.selected.begin(), m.selected.end());
    ckpt.tensors.push_back({"selected", {static_cast<int64_t>(sel.size())}, std::move(sel)});
    write_checkpoint(path, ckpt);
}

inline EncodingModel load_encoding(const std::string& path) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind != "encoding")
        throw FormatError("checkpoint '" + path + "' holds kind '" + ckpt.kind + "', expected encoding");
    EncodingModel m;
    m.voxel_count = ckpt.get_int("voxel_count");
    m.feature_dim = ckpt.get_int("feature_dim");
    m.weights = ckpt.tensor("weights").data;
    m.r2 = ckpt.tensor("r2").data;
    const auto& sel = ckpt.tensor("selected").data;
    m.selected.assign(sel.begin(), sel.end());
    return m;
}

}  // namespace capsdec
