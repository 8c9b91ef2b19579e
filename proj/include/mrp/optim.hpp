#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mrp/autodiff.hpp"
#include "mrp/common.hpp"

namespace mrp {

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double l2 = 1e-5;  // coupled: added to the gradient before the moment updates
};

struct AdamState {
    std::size_t step = 0;
    std::vector<Matrix> m;
    std::vector<Matrix> v;

    static AdamState for_parameters(const ad::ParameterSet& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
            s.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        }
        return s;
    }
};

/// x * 0 is 0 for finite x and NaN otherwise; much faster than allFinite().
inline bool all_finite(const Matrix& m) { return (m.array() * 0.0).sum() == 0.0; }

/// One Adam update from the gradients accumulated in `params`. Gradients are
/// checked for finiteness before any parameter is touched.
inline void adam_step(ad::ParameterSet& params, AdamState& state, const AdamConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw ArgumentError("learning rate must be positive");
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, model has " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (state.m[i].rows() != p.value.rows() || state.m[i].cols() != p.value.cols()) {
            throw ShapeError("optimizer state for '" + p.name + "' has shape " + shape_string(state.m[i]) +
                             ", parameter has " + shape_string(p.value));
        }
        if (!all_finite(p.grad)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    const double step_size = cfg.lr / correction1;
    const double inv_sqrt_c2 = 1.0 / std::sqrt(correction2);
    const double b1 = cfg.beta1, b2 = cfg.beta2, l2 = cfg.l2, eps = cfg.eps;
    // Cache-sized blocks so the three passes touch memory once.
    constexpr Eigen::Index block = 2048;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const Eigen::Index n = p.value.size();
        for (Eigen::Index at = 0; at < n; at += block) {
            const Eigen::Index len = std::min(block, n - at);
            Eigen::Map<Eigen::ArrayXd> theta(p.value.data() + at, len);
            Eigen::Map<const Eigen::ArrayXd> grad(p.grad.data() + at, len);
            Eigen::Map<Eigen::ArrayXd> m(state.m[i].data() + at, len);
            Eigen::Map<Eigen::ArrayXd> v(state.v[i].data() + at, len);
            const auto g = grad + l2 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g.square();
            theta -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps);
        }
    }
}

}  // namespace mrp
