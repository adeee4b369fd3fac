#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "capsdec/errors.hpp"
#include "capsdec/tensor.hpp"

namespace capsdec {

// Per-parameter Adam state. Moments match the tracked parameter's shape;
// step_count advances by exactly one per update.
template <typename S = float>
struct AdamState {
    std::vector<S> first_moment;
    std::vector<S> second_moment;
    int64_t step_count = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// One bias-corrected Adam update, applied in place. Update math runs in
// double; parameters and moments stay in S.
template <typename S>
void adam_step(Tensor<S>& param, const std::vector<S>& grad, AdamState<S>& state) {
    const size_t n = param.value().size();
    if (grad.size() != n)
        throw DimensionError("adam_step: grad size " + std::to_string(grad.size()) +
                             " does not match param " + shape_str(param.shape()));
    if (state.first_moment.size() != n) state.first_moment.assign(n, S(0));
    if (state.second_moment.size() != n) state.second_moment.assign(n, S(0));

    state.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    S* p = param.data();
    for (size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grad[i]);
        const double m = b1 * static_cast<double>(state.first_moment[i]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(state.second_moment[i]) + (1.0 - b2) * g * g;
        state.first_moment[i] = static_cast<S>(m);
        state.second_moment[i] = static_cast<S>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        p[i] = static_cast<S>(static_cast<double>(p[i]) -
                              state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
}

// Adam over a fixed parameter list; order defines the optimizer state layout.
template <typename S = float>
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<Tensor<S>> params, double lr = 1e-3) : params_(std::move(params)) {
        states_.resize(params_.size());
        for (auto& st : states_) st.learning_rate = lr;
    }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) continue;
            adam_step(params_[i], params_[i].grad(), states_[i]);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor<S>> params_;
    std::vector<AdamState<S>> states_;
};

}  // namespace capsdec
