#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mrp/common.hpp"

namespace mrp {

/// Per-segment model predictions, one value in (0,1) per scored segment.
using ScoreVector = std::vector<double>;

/// Most Replayed ground truth: exactly 100 finite values in [0,1].
/// Construction validates; a curve that exists is a valid curve.
class ReplayCurve {
public:
    explicit ReplayCurve(std::vector<double> scores) : scores_(std::move(scores)) {
        if (scores_.size() != kCurveLength) {
            throw ValidationError("curve length " + std::to_string(scores_.size()) + " ≠ " +
                                  std::to_string(kCurveLength));
        }
        for (std::size_t i = 0; i < scores_.size(); ++i) {
            const double v = scores_[i];
            if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
                throw ValidationError("curve value " + std::to_string(v) + " at index " + std::to_string(i) +
                                      " outside [0,1]");
            }
        }
    }

    static ReplayCurve constant(double value) { return ReplayCurve(std::vector<double>(kCurveLength, value)); }

    const std::vector<double>& scores() const { return scores_; }
    std::span<const double> view() const { return scores_; }
    std::size_t size() const { return scores_.size(); }
    double operator[](std::size_t i) const { return scores_[i]; }

    bool is_constant() const {
        for (double v : scores_) {
            if (v != scores_.front()) return false;
        }
        return true;
    }

    friend bool operator==(const ReplayCurve&, const ReplayCurve&) = default;

private:
    std::vector<double> scores_;
};

struct FeatureSequence {
    std::string video_id;
    Matrix features;  // T x 1024

    std::size_t length() const { return static_cast<std::size_t>(features.rows()); }
};

/// Throws unless every row has `dim` finite entries and T >= min_length.
inline void validate_features(const FeatureSequence& seq, std::size_t dim = kFeatureDim, std::size_t min_length = 1) {
    if (static_cast<std::size_t>(seq.features.cols()) != dim) {
        throw ShapeError("video '" + seq.video_id + "': feature width " + std::to_string(seq.features.cols()) +
                         " != " + std::to_string(dim));
    }
    if (seq.length() < min_length) {
        throw ValidationError("video '" + seq.video_id + "': " + std::to_string(seq.length()) +
                              " segments, need at least " + std::to_string(min_length));
    }
    if (!seq.features.allFinite()) {
        throw ValidationError("video '" + seq.video_id + "': non-finite feature value");
    }
}

struct DatasetRecord {
    FeatureSequence features;
    ReplayCurve ground_truth;
    // Set when the curve carries no ranking information (all values equal).
    bool degenerate_curve = false;

    const std::string& id() const { return features.video_id; }
};

}  // namespace mrp
