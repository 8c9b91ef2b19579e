#pragma once

// Pairwise ranking targets s_ij = sgn(y_i - y_j) and the margin ranking loss
//
//   L = mean over sampled pairs of max(0, -s_ij * (p_i - p_j) + margin).
//
// Tied pairs (s = 0) are never sampled: their hinge is the constant margin
// with zero gradient, so dropping them does not change the optimization.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mrp/autodiff.hpp"
#include "mrp/common.hpp"
#include "mrp/rng.hpp"

namespace mrp {

struct ComparisonPair {
    std::uint32_t i;
    std::uint32_t j;
    std::int8_t s;  // +1 if y_i > y_j, -1 if y_i < y_j

    friend bool operator==(const ComparisonPair&, const ComparisonPair&) = default;
};

struct ComparisonTargets {
    std::vector<ComparisonPair> pairs;
    std::size_t source_len = 0;
    std::uint64_t seed = 0;
    bool degenerate = false;  // every pair of the source is tied
};

inline std::int8_t sign_of_difference(double a, double b) {
    if (a > b) return 1;
    if (a < b) return -1;
    return 0;
}

/// Number of ordered pairs (i, j), i != j, with y_i != y_j.
inline std::size_t count_untied_pairs(std::span<const double> gt) {
    std::vector<double> sorted(gt.begin(), gt.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::size_t tied = 0;
    for (std::size_t a = 0; a < n;) {
        std::size_t b = a;
        while (b < n && sorted[b] == sorted[a]) ++b;
        tied += (b - a) * (b - a - 1);
        a = b;
    }
    return n * (n - 1) - tied;
}

/// All untied ordered pairs when there are at most `max_pairs` of them (in
/// (i, j) lexicographic order); otherwise `max_pairs` draws with replacement,
/// uniform over untied ordered pairs.
inline ComparisonTargets build_targets(std::span<const double> gt, std::size_t max_pairs, std::uint64_t seed) {
    if (gt.size() < 2) throw ArgumentError("comparison targets need at least 2 scores");
    if (max_pairs < 1) throw ArgumentError("max_pairs must be >= 1");
    const std::size_t n = gt.size();
    ComparisonTargets out;
    out.source_len = n;
    out.seed = seed;

    const std::size_t untied = count_untied_pairs(gt);
    if (untied == 0) {
        out.degenerate = true;
        return out;
    }
    auto pair_of = [&](std::size_t i, std::size_t j) {
        return ComparisonPair{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
                              sign_of_difference(gt[i], gt[j])};
    };
    if (untied <= max_pairs) {
        out.pairs.reserve(untied);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i != j && gt[i] != gt[j]) out.pairs.push_back(pair_of(i, j));
            }
        }
        return out;
    }

    Rng rng(seed);
    out.pairs.reserve(max_pairs);
    const std::size_t total = n * (n - 1);
    if (untied * 4 >= total) {
        // Rejection sampling over ordered pairs; accepts with probability >= 1/4.
        std::uniform_int_distribution<std::size_t> first(0, n - 1);
        std::uniform_int_distribution<std::size_t> second(0, n - 2);
        while (out.pairs.size() < max_pairs) {
            const std::size_t i = first(rng);
            std::size_t j = second(rng);
            if (j >= i) ++j;
            if (gt[i] != gt[j]) out.pairs.push_back(pair_of(i, j));
        }
    } else {
        std::vector<ComparisonPair> all;
        all.reserve(untied);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i != j && gt[i] != gt[j]) all.push_back(pair_of(i, j));
            }
        }
        std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
        for (std::size_t k = 0; k < max_pairs; ++k) out.pairs.push_back(all[pick(rng)]);
    }
    return out;
}

struct RankLoss {
    double loss = 0.0;
    std::vector<double> grad;  // d loss / d pred, same length as pred
};

/// Mean hinge over the target pairs and its subgradient (0 at the kink).
inline RankLoss margin_rank_loss(std::span<const double> pred, const ComparisonTargets& targets, double margin) {
    if (!(margin >= 0.0)) throw ArgumentError("margin must be >= 0");
    RankLoss out;
    out.grad.assign(pred.size(), 0.0);
    if (targets.pairs.empty()) return out;
    const double inv = 1.0 / static_cast<double>(targets.pairs.size());
    double total = 0.0;
    for (const auto& pr : targets.pairs) {
        if (pr.i >= pred.size() || pr.j >= pred.size()) {
            throw ArgumentError("target pair (" + std::to_string(pr.i) + ", " + std::to_string(pr.j) +
                                ") out of range for " + std::to_string(pred.size()) + " predictions");
        }
        const double hinge = -pr.s * (pred[pr.i] - pred[pr.j]) + margin;
        if (hinge > 0.0) {
            total += hinge;
            out.grad[pr.i] -= pr.s * inv;
            out.grad[pr.j] += pr.s * inv;
        }
    }
    out.loss = total * inv;
    return out;
}

/// Tape node for the loss of an (M x 1) prediction column.
inline ad::Var margin_rank_loss(ad::Var pred, const ComparisonTargets& targets, double margin) {
    const Matrix& p = pred.value();
    if (p.cols() != 1) throw ShapeError("ranking loss expects a column of scores, got " + shape_string(p));
    const std::span<const double> values(p.data(), static_cast<std::size_t>(p.size()));
    auto r = margin_rank_loss(values, targets, margin);
    std::uint64_t active = 0;
    for (const auto& pr : targets.pairs) {
        active = active * 0x100000001b3ULL + (-pr.s * (values[pr.i] - values[pr.j]) + margin > 0.0 ? 1u : 2u);
    }
    pred.tape().mix_signature(active);
    Matrix g = Eigen::Map<const Matrix>(r.grad.data(), p.rows(), 1);
    return ad::external_scalar(pred, r.loss, std::move(g));
}

}  // namespace mrp
