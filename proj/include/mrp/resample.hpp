#pragma once

// Length alignment between variable-length feature sequences and the fixed
// 100-point replay curve: linear interpolation of curves up to T points, and
// floor-edge block averaging of features (or curves) down to a bin count.

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "mrp/common.hpp"
#include "mrp/types.hpp"

namespace mrp {

struct ResampledCurve {
    std::vector<double> scores;
    std::size_t source_length = kCurveLength;
};

struct BinnedFeatures {
    Matrix features;                     // bins x dim
    std::vector<std::size_t> bin_edges;  // bins + 1 entries, edges[0] = 0, edges[bins] = T
};

/// Bin b covers [floor(b*length/bins), floor((b+1)*length/bins)). Every bin is
/// nonempty when bins <= length and widths differ by at most one.
inline std::vector<std::size_t> bin_edges(std::size_t length, std::size_t bins) {
    if (bins == 0) throw ArgumentError("bin count must be positive");
    if (bins > length) {
        throw ArgumentError("cannot split " + std::to_string(length) + " items into " + std::to_string(bins) +
                            " nonempty bins");
    }
    std::vector<std::size_t> edges(bins + 1);
    for (std::size_t b = 0; b <= bins; ++b) edges[b] = b * length / bins;
    return edges;
}

/// Linear interpolation on normalized coordinates: output k sits at
/// k/(L-1) of the source span. Endpoints are reproduced exactly.
inline std::vector<double> interpolate_linear(std::span<const double> source, std::size_t target_len) {
    if (target_len < 2) throw ArgumentError("interpolation target length must be >= 2, got " + std::to_string(target_len));
    if (source.empty()) throw ArgumentError("cannot interpolate an empty sequence");
    std::vector<double> out(target_len);
    if (source.size() == 1) {
        std::fill(out.begin(), out.end(), source[0]);
        return out;
    }
    const std::size_t last = source.size() - 1;
    for (std::size_t k = 0; k < target_len; ++k) {
        const double u = static_cast<double>(k) * static_cast<double>(last) / static_cast<double>(target_len - 1);
        auto i0 = static_cast<std::size_t>(u);
        if (i0 >= last) {
            out[k] = source[last];
            continue;
        }
        const double frac = u - static_cast<double>(i0);
        out[k] = frac == 0.0 ? source[i0] : source[i0] + frac * (source[i0 + 1] - source[i0]);
    }
    return out;
}

inline std::vector<double> bin_average(std::span<const double> values, std::size_t bins) {
    const auto edges = bin_edges(values.size(), bins);
    std::vector<double> out(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        double sum = 0.0;
        for (std::size_t i = edges[b]; i < edges[b + 1]; ++i) sum += values[i];
        out[b] = sum / static_cast<double>(edges[b + 1] - edges[b]);
    }
    return out;
}

/// Brings a score sequence to exactly `n` points: block means when it is at
/// least that long, linear interpolation otherwise.
inline std::vector<double> resize_scores(std::span<const double> values, std::size_t n) {
    if (values.size() == n) return {values.begin(), values.end()};
    if (values.size() > n) return bin_average(values, n);
    return interpolate_linear(values, n);
}

inline ResampledCurve interpolate_curve(const ReplayCurve& curve, std::size_t target_len) {
    return {interpolate_linear(curve.view(), target_len), curve.size()};
}

inline ResampledCurve bin_curve(const ReplayCurve& curve, std::size_t bins) {
    if (bins < 2 || bins > curve.size()) {
        throw ArgumentError("curve bin count must lie in [2, " + std::to_string(curve.size()) + "], got " +
                            std::to_string(bins));
    }
    return {bin_average(curve.view(), bins), curve.size()};
}

inline BinnedFeatures bin_features(const Matrix& features, std::size_t bins) {
    BinnedFeatures out;
    out.bin_edges = bin_edges(static_cast<std::size_t>(features.rows()), bins);
    out.features.resize(static_cast<Eigen::Index>(bins), features.cols());
    for (std::size_t b = 0; b < bins; ++b) {
        const auto begin = static_cast<Eigen::Index>(out.bin_edges[b]);
        const auto count = static_cast<Eigen::Index>(out.bin_edges[b + 1] - out.bin_edges[b]);
        out.features.row(static_cast<Eigen::Index>(b)) =
            features.middleRows(begin, count).colwise().sum() / static_cast<double>(count);
    }
    return out;
}

inline BinnedFeatures bin_features(const FeatureSequence& seq, std::size_t bins) {
    return bin_features(seq.features, bins);
}

}  // namespace mrp
