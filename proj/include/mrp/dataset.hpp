#pragma once

// On-disk dataset layout:
//
//   <root>/index.json        {"videos": [{"id": "...", "t": T}, ...]}
//   <root>/feat/<id>.f32     exactly 4*T*1024 bytes, little-endian float32,
//                            row-major, one row per segment
//   <root>/mr/<id>.json      {"scores": [100 values in [0,1]]}
//
// Feature values are stored as float32; the in-memory representation is
// double. Values that came from float32 survive write/load bit-exactly.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/common.hpp"
#include "mrp/resample.hpp"
#include "mrp/rng.hpp"
#include "mrp/types.hpp"

namespace mrp {

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    out << text;
}

}  // namespace detail

/// Decodes little-endian float32 rows into a (rows x cols) matrix.
inline Matrix decode_f32(std::span<const char> bytes, std::size_t rows, std::size_t cols) {
    if (bytes.size() != 4 * rows * cols) {
        throw FormatError("expected " + std::to_string(4 * rows * cols) + " bytes, found " +
                          std::to_string(bytes.size()));
    }
    Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    double* dst = out.data();
    for (std::size_t i = 0; i < rows * cols; ++i) {
        std::uint32_t raw;
        std::memcpy(&raw, bytes.data() + 4 * i, 4);
        dst[i] = static_cast<double>(std::bit_cast<float>(detail::to_little_endian(raw)));
    }
    return out;
}

inline std::vector<char> encode_f32(const Matrix& m) {
    std::vector<char> bytes(4 * static_cast<std::size_t>(m.size()));
    const double* src = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const auto raw = detail::to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(src[i])));
        std::memcpy(bytes.data() + 4 * i, &raw, 4);
    }
    return bytes;
}

inline std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root) {
    const auto index = detail::read_json_file(root / "index.json");
    if (!index.contains("videos") || !index["videos"].is_array()) {
        throw FormatError(root.string() + "/index.json: missing \"videos\" array");
    }
    std::vector<DatasetRecord> records;
    records.reserve(index["videos"].size());
    for (const auto& entry : index["videos"]) {
        if (!entry.contains("id") || !entry["id"].is_string() || !entry.contains("t") ||
            !entry["t"].is_number_unsigned()) {
            throw FormatError("index entry needs string \"id\" and positive integer \"t\": " + entry.dump());
        }
        const auto id = entry["id"].get<std::string>();
        const auto t = entry["t"].get<std::size_t>();
        if (id.empty()) throw FormatError("index entry with empty id");
        if (t == 0) throw FormatError("video '" + id + "': t must be positive");

        const auto feat_path = root / "feat" / (id + ".f32");
        const auto mr_path = root / "mr" / (id + ".json");
        if (!std::filesystem::exists(feat_path)) throw LoadError("video '" + id + "': missing " + feat_path.string());
        if (!std::filesystem::exists(mr_path)) throw LoadError("video '" + id + "': missing " + mr_path.string());

        const auto bytes = detail::read_file_bytes(feat_path);
        Matrix features;
        try {
            features = decode_f32(bytes, t, kFeatureDim);
        } catch (const FormatError& e) {
            throw FormatError("video '" + id + "': " + feat_path.filename().string() + ": " + e.what());
        }
        FeatureSequence seq{id, std::move(features)};
        validate_features(seq);

        const auto mr = detail::read_json_file(mr_path);
        if (!mr.contains("scores") || !mr["scores"].is_array()) {
            throw FormatError("video '" + id + "': " + mr_path.filename().string() + " lacks a \"scores\" array");
        }
        std::vector<double> scores;
        for (const auto& v : mr["scores"]) {
            if (!v.is_number()) throw FormatError("video '" + id + "': non-numeric curve value");
            scores.push_back(v.get<double>());
        }
        ReplayCurve curve = [&] {
            try {
                return ReplayCurve(std::move(scores));
            } catch (const ValidationError& e) {
                throw ValidationError("video '" + id + "': " + e.what());
            }
        }();
        const bool degenerate = curve.is_constant();
        records.push_back({std::move(seq), std::move(curve), degenerate});
    }
    return records;
}

inline void write_dataset(const std::filesystem::path& root, std::span<const DatasetRecord> records) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "feat");
    fs::create_directories(root / "mr");
    nlohmann::json index;
    index["videos"] = nlohmann::json::array();
    for (const auto& rec : records) {
        validate_features(rec.features);
        index["videos"].push_back({{"id", rec.id()}, {"t", rec.features.length()}});
        const auto bytes = encode_f32(rec.features.features);
        std::ofstream out(root / "feat" / (rec.id() + ".f32"), std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write features for '" + rec.id() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        detail::write_text_file(root / "mr" / (rec.id() + ".json"),
                                nlohmann::json{{"scores", rec.ground_truth.scores()}}.dump());
    }
    detail::write_text_file(root / "index.json", index.dump(2));
}

/// Known feature-to-score law used to fabricate verifiable datasets.
struct SyntheticLaw {
    std::uint64_t seed = 0;
    std::vector<double> weight;  // unit norm, length = feature dim
    double noise_std = 0.0;
    std::size_t smoothing_window = 1;

    /// Direction drawn from the seed, normalized.
    static SyntheticLaw random(std::uint64_t seed, double noise_std, std::size_t smoothing_window) {
        Rng rng(derive_seed(seed, 0xfeed));
        std::vector<double> w(kFeatureDim);
        double norm2 = 0.0;
        for (auto& x : w) {
            x = standard_normal(rng);
            norm2 += x * x;
        }
        for (auto& x : w) x /= std::sqrt(norm2);
        return {seed, std::move(w), noise_std, smoothing_window};
    }

    /// Weight is the unit vector along `axis`.
    static SyntheticLaw axis(std::uint64_t seed, std::size_t axis, double noise_std, std::size_t smoothing_window) {
        std::vector<double> w(kFeatureDim, 0.0);
        w.at(axis) = 1.0;
        return {seed, std::move(w), noise_std, smoothing_window};
    }

    void validate() const {
        if (weight.size() != kFeatureDim) {
            throw ArgumentError("synthetic weight must have " + std::to_string(kFeatureDim) + " entries");
        }
        const double norm = std::sqrt(std::inner_product(weight.begin(), weight.end(), weight.begin(), 0.0));
        if (std::abs(norm - 1.0) > 1e-9) throw ArgumentError("synthetic weight must have unit norm");
        if (!(noise_std >= 0.0)) throw ArgumentError("noise_std must be >= 0");
        if (smoothing_window == 0) throw ArgumentError("smoothing_window must be positive");
    }
};

/// Centered moving average; the window is truncated at the sequence ends.
inline std::vector<double> moving_average(std::span<const double> values, std::size_t window) {
    const auto n = values.size();
    const std::size_t left = (window - 1) / 2;
    const std::size_t right = window - 1 - left;
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + values[i];
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= left ? i - left : 0;
        const std::size_t hi = std::min(n, i + right + 1);
        out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    }
    return out;
}

/// Generates `n_videos` records whose curves follow `law`. Video k depends
/// only on (law, k), so prefixes of larger datasets agree with smaller ones.
inline std::vector<DatasetRecord> generate_synthetic(std::size_t n_videos, std::pair<std::size_t, std::size_t> t_range,
                                                     const SyntheticLaw& law) {
    if (n_videos < 1) throw ArgumentError("n_videos must be >= 1");
    if (t_range.first < 10) throw ArgumentError("minimum segment count must be >= 10");
    if (t_range.second < t_range.first) throw ArgumentError("t_range max < min");
    law.validate();

    const Eigen::Map<const Eigen::VectorXd> weight(law.weight.data(), static_cast<Eigen::Index>(law.weight.size()));
    std::vector<DatasetRecord> records;
    records.reserve(n_videos);
    for (std::size_t k = 0; k < n_videos; ++k) {
        Rng rng(derive_seed(law.seed, k));
        std::uniform_int_distribution<std::size_t> t_dist(t_range.first, t_range.second);
        const std::size_t t = t_dist(rng);

        Matrix features(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(kFeatureDim));
        for (Eigen::Index i = 0; i < features.size(); ++i) {
            // Round through float32 so the record survives the on-disk format unchanged.
            features.data()[i] = static_cast<double>(static_cast<float>(standard_normal(rng)));
        }

        const Eigen::VectorXd logits = features * weight;
        std::vector<double> raw(t);
        for (std::size_t i = 0; i < t; ++i) {
            raw[i] = 1.0 / (1.0 + std::exp(-logits(static_cast<Eigen::Index>(i))));
            if (law.noise_std > 0.0) raw[i] += law.noise_std * standard_normal(rng);
        }
        const auto smoothed = moving_average(raw, law.smoothing_window);
        auto curve = resize_scores(smoothed, kCurveLength);

        const auto [lo, hi] = std::minmax_element(curve.begin(), curve.end());
        const double min = *lo;
        const double span = *hi - *lo;
        bool degenerate = !(span > 0.0);
        if (degenerate) {
            std::fill(curve.begin(), curve.end(), 0.5);
        } else {
            for (auto& v : curve) v = std::clamp((v - min) / span, 0.0, 1.0);
        }

        char id[32];
        std::snprintf(id, sizeof id, "synth_%04zu", k);
        records.push_back({FeatureSequence{id, std::move(features)}, ReplayCurve(std::move(curve)), degenerate});
    }
    return records;
}

}  // namespace mrp
