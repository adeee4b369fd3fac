#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "capsdec/tensor.hpp"

namespace capsdec {

// Compares the reverse-mode gradient of a scalar-valued function against
// central finite differences and returns the worst relative discrepancy.
// Near-zero gradient pairs are compared on an absolute scale (floor 1e-6).
template <typename S, typename F>
double grad_check(F&& f, Tensor<S>& x, double h) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor<S> y = f(x);
    y.backward();
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    x.set_requires_grad(false);  // finite-difference evals skip the graph
    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const S orig = x.data()[i];
        x.data()[i] = static_cast<S>(static_cast<double>(orig) + h);
        const double fp = static_cast<double>(f(x).item());
        x.data()[i] = static_cast<S>(static_cast<double>(orig) - h);
        const double fm = static_cast<double>(f(x).item());
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double scale = std::max({std::abs(analytic[static_cast<size_t>(i)]), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic[static_cast<size_t>(i)] - numeric) / scale);
    }
    x.set_requires_grad(true);
    return worst;
}

}  // namespace capsdec
