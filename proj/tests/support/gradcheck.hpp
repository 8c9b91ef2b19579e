#pragma once

// Central finite-difference checks for tape gradients.
//
// Analytic gradients come from a double-precision backward pass. The finite
// differences are taken on a reference copy of the same graph, usually in
// long double, so that rounding noise in the loss (~1 ulp / 2h) stays far
// below the tolerance even for gradient entries close to zero.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mrp/autodiff.hpp"
#include "mrp/rng.hpp"

namespace mrp::testing {

struct GradCheckReport {
    double max_error = 0.0;  // relative, or absolute where |analytic| < abs_floor
    std::string worst;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // perturbation crossed a kink
};

struct GradCheckOptions {
    double h = 1e-5;
    double abs_floor = 1e-8;
    std::size_t entries_per_tensor = 24;
};

inline double gradient_error(double analytic, double numeric, double abs_floor) {
    if (std::abs(analytic) < abs_floor) return std::abs(analytic - numeric);
    return std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
}

/// `build(tape)` constructs the scalar loss from `params`; `build_ref(tape)`
/// constructs the same loss from `ref_params` (same tensors, same order,
/// possibly another scalar type). Both must be deterministic, including any
/// dropout masks. `ref_params` values are overwritten with `params`.
template <class R, class Build, class BuildRef>
GradCheckReport check_gradients(ad::ParameterSet& params, ad::BasicParameterSet<R>& ref_params, Build&& build,
                                BuildRef&& build_ref, Rng& pick, const GradCheckOptions& opt = {}) {
    for (std::size_t i = 0; i < params.size(); ++i) ref_params[i].value = params[i].value.template cast<R>();

    params.zero_grad();
    std::uint64_t base_signature = 0;
    {
        ad::Tape tape;
        const ad::Var loss = build(tape);
        tape.backward(loss);
    }
    auto evaluate = [&](std::uint64_t& signature) {
        ad::BasicTape<R> tape;
        const R v = build_ref(tape).value()(0, 0);
        signature = tape.nonsmooth_signature();
        return v;
    };
    evaluate(base_signature);

    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const auto& p = params[t];
        auto& ref = ref_params[t];
        const auto n = static_cast<std::size_t>(p.value.size());
        std::vector<std::size_t> entries(n);
        for (std::size_t i = 0; i < n; ++i) entries[i] = i;
        if (n > opt.entries_per_tensor) {
            std::shuffle(entries.begin(), entries.end(), pick);
            entries.resize(opt.entries_per_tensor);
        }
        for (const std::size_t e : entries) {
            R& theta = ref.value.data()[e];
            const R saved = theta;
            const R h = static_cast<R>(opt.h);
            std::uint64_t sig_plus = 0, sig_minus = 0;
            theta = saved + h;
            const R f_plus = evaluate(sig_plus);
            theta = saved - h;
            const R f_minus = evaluate(sig_minus);
            theta = saved;
            if (sig_plus != base_signature || sig_minus != base_signature) {
                ++report.skipped;
                continue;
            }
            const auto numeric = static_cast<double>((f_plus - f_minus) / (2 * h));
            const double analytic = p.grad.data()[e];
            const double err = gradient_error(analytic, numeric, opt.abs_floor);
            ++report.checked;
            if (err > report.max_error) {
                report.max_error = err;
                report.worst = p.name + "[" + std::to_string(e) + "] analytic=" + std::to_string(analytic) +
                               " numeric=" + std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace mrp::testing
