#pragma once

// Ranking metrics: precision@K, Kendall's tau, Krippendorff's alpha, and the
// Monte-Carlo random baseline.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrp/common.hpp"
#include "mrp/rng.hpp"

namespace mrp {

/// Alpha is undefined for the given ratings (no pairable values, or no
/// variation at all).
struct UndefinedAlpha : Error {
    using Error::Error;
};

/// Best-first permutation of item indices.
struct RankingOf {
    std::vector<std::size_t> order;

    std::size_t size() const { return order.size(); }

    /// position[i] = rank of item i (0 = best).
    std::vector<std::size_t> positions() const {
        std::vector<std::size_t> pos(order.size());
        for (std::size_t r = 0; r < order.size(); ++r) pos[order[r]] = r;
        return pos;
    }

    bool is_permutation() const {
        std::vector<bool> seen(order.size(), false);
        for (auto i : order) {
            if (i >= order.size() || seen[i]) return false;
            seen[i] = true;
        }
        return true;
    }

    friend bool operator==(const RankingOf&, const RankingOf&) = default;
};

/// Descending score order; equal scores keep ascending index order.
inline RankingOf ranking_from_scores(std::span<const double> scores) {
    RankingOf r;
    r.order.resize(scores.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return r;
}

inline double precision_at_k(const RankingOf& pred, const RankingOf& gt, std::size_t k) {
    if (pred.size() != gt.size()) {
        throw ArgumentError("rankings differ in length: " + std::to_string(pred.size()) + " vs " +
                            std::to_string(gt.size()));
    }
    if (k < 1 || k > gt.size()) {
        throw ArgumentError("k = " + std::to_string(k) + " outside [1, " + std::to_string(gt.size()) + "]");
    }
    std::vector<bool> positive(gt.size(), false);
    for (std::size_t r = 0; r < k; ++r) positive[gt.order[r]] = true;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < k; ++r) hits += positive[pred.order[r]];
    return static_cast<double>(hits) / static_cast<double>(k);
}

inline double precision_at_k(std::span<const double> pred_scores, std::span<const double> gt_scores, std::size_t k) {
    return precision_at_k(ranking_from_scores(pred_scores), ranking_from_scores(gt_scores), k);
}

namespace detail {

// Inversions of v, counted by merge sort; v is sorted on return.
inline std::uint64_t count_inversions(std::vector<std::size_t>& v, std::vector<std::size_t>& buf, std::size_t lo,
                                      std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::uint64_t inv = count_inversions(v, buf, lo, mid) + count_inversions(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            inv += mid - i;
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

}  // namespace detail

/// (concordant - discordant) / (M(M-1)/2) for two permutations, O(M log M).
/// Rankings of fewer than two items are trivially concordant.
inline double kendall_tau(const RankingOf& a, const RankingOf& b) {
    if (a.size() != b.size()) {
        throw ArgumentError("rankings differ in length: " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    }
    const std::size_t m = a.size();
    if (m < 2) return 1.0;
    const auto pos_b = b.positions();
    std::vector<std::size_t> seq(m), buf(m);
    for (std::size_t r = 0; r < m; ++r) seq[r] = pos_b[a.order[r]];
    const auto discordant = static_cast<double>(detail::count_inversions(seq, buf, 0, m));
    const double pairs = static_cast<double>(m) * static_cast<double>(m - 1) / 2.0;
    return (pairs - 2.0 * discordant) / pairs;
}

enum class AlphaMetric { nominal, ordinal, interval };

inline AlphaMetric parse_alpha_metric(std::string_view name) {
    if (name == "nominal") return AlphaMetric::nominal;
    if (name == "ordinal") return AlphaMetric::ordinal;
    if (name == "interval") return AlphaMetric::interval;
    throw ArgumentError("unknown alpha metric '" + std::string(name) + "'");
}

/// Krippendorff's alpha over a raters x items matrix; NaN marks a missing
/// rating. Items with fewer than two ratings are not pairable and are
/// dropped. Computed through the coincidence matrix of the distinct values.
inline double krippendorff_alpha(const Matrix& ratings, AlphaMetric metric = AlphaMetric::ordinal) {
    if (ratings.rows() < 2) throw ArgumentError("alpha needs at least 2 raters");

    std::vector<double> values;
    for (Eigen::Index i = 0; i < ratings.size(); ++i) {
        const double v = ratings.data()[i];
        if (!std::isnan(v)) {
            if (!std::isfinite(v)) throw ArgumentError("ratings must be finite or NaN");
            values.push_back(v);
        }
    }
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const std::size_t nv = values.size();
    auto index_of = [&](double v) {
        return static_cast<std::size_t>(std::lower_bound(values.begin(), values.end(), v) - values.begin());
    };

    Matrix o = Matrix::Zero(static_cast<Eigen::Index>(nv), static_cast<Eigen::Index>(nv));
    std::size_t pairable_items = 0;
    std::vector<std::size_t> unit;
    for (Eigen::Index item = 0; item < ratings.cols(); ++item) {
        unit.clear();
        for (Eigen::Index r = 0; r < ratings.rows(); ++r) {
            if (!std::isnan(ratings(r, item))) unit.push_back(index_of(ratings(r, item)));
        }
        if (unit.size() < 2) continue;
        ++pairable_items;
        const double w = 1.0 / static_cast<double>(unit.size() - 1);
        for (std::size_t a = 0; a < unit.size(); ++a) {
            for (std::size_t b = 0; b < unit.size(); ++b) {
                if (a != b) o(static_cast<Eigen::Index>(unit[a]), static_cast<Eigen::Index>(unit[b])) += w;
            }
        }
    }
    if (pairable_items == 0) throw UndefinedAlpha("alpha is undefined: no item has two or more ratings");

    const Eigen::VectorXd nc = o.rowwise().sum();
    const double n = nc.sum();

    Matrix delta2(static_cast<Eigen::Index>(nv), static_cast<Eigen::Index>(nv));
    for (std::size_t c = 0; c < nv; ++c) {
        for (std::size_t k = 0; k < nv; ++k) {
            double d = 0.0;
            switch (metric) {
                case AlphaMetric::nominal: d = c == k ? 0.0 : 1.0; break;
                case AlphaMetric::interval: d = (values[c] - values[k]) * (values[c] - values[k]); break;
                case AlphaMetric::ordinal: {
                    const std::size_t lo = std::min(c, k), hi = std::max(c, k);
                    double s = 0.0;
                    for (std::size_t g = lo; g <= hi; ++g) s += nc(static_cast<Eigen::Index>(g));
                    s -= (nc(static_cast<Eigen::Index>(c)) + nc(static_cast<Eigen::Index>(k))) / 2.0;
                    d = c == k ? 0.0 : s * s;
                    break;
                }
            }
            delta2(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) = d;
        }
    }
    const double observed = o.cwiseProduct(delta2).sum();
    const double expected = (nc * nc.transpose()).cwiseProduct(delta2).sum();
    if (!(expected > 0.0)) throw UndefinedAlpha("alpha is undefined: all pairable ratings are identical");
    return 1.0 - (n - 1.0) * observed / expected;
}

struct Summary {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation; 0 for a single value
    std::size_t n = 0;
};

inline Summary summarize(std::span<const double> xs) {
    Summary s;
    s.n = xs.size();
    if (xs.empty()) return s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

struct BaselineEstimate {
    std::size_t k;
    double mean;
    double standard_error;
};

/// Precision@K of uniformly random rankings against a fixed ground-truth
/// ranking of M items, estimated over `trials` shuffles.
inline std::vector<BaselineEstimate> random_precision_baseline(std::size_t m, std::span<const std::size_t> ks,
                                                               std::size_t trials, std::uint64_t seed) {
    if (trials < 2) throw ArgumentError("baseline needs at least 2 trials");
    RankingOf gt;
    gt.order.resize(m);
    std::iota(gt.order.begin(), gt.order.end(), std::size_t{0});
    RankingOf pred = gt;
    Rng rng(seed);
    std::vector<std::vector<double>> samples(ks.size());
    for (auto& s : samples) s.reserve(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        std::shuffle(pred.order.begin(), pred.order.end(), rng);
        for (std::size_t i = 0; i < ks.size(); ++i) samples[i].push_back(precision_at_k(pred, gt, ks[i]));
    }
    std::vector<BaselineEstimate> out;
    for (std::size_t i = 0; i < ks.size(); ++i) {
        const auto s = summarize(samples[i]);
        out.push_back({ks[i], s.mean, s.sd / std::sqrt(static_cast<double>(trials))});
    }
    return out;
}

}  // namespace mrp
