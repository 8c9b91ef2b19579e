#pragma once

// Segment scoring models.
//
//   fc:      x -> Linear+ReLU -> Dropout -> Linear+Sigmoid, applied per row.
//   pglsum:  z = GlobalMHA(x) + [LocalMHA_w(x_w)]_w + x, then
//            Dropout -> LayerNorm -> Linear+ReLU -> Dropout -> LayerNorm -> Linear+Sigmoid.
//
// Local attention runs one independent multi-head module per contiguous
// window; the window outputs are placed back at their row positions. The
// ablation kinds drop the local term, the global term, or the residual x.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/autodiff.hpp"
#include "mrp/common.hpp"
#include "mrp/resample.hpp"
#include "mrp/rng.hpp"
#include "mrp/types.hpp"

namespace mrp {

enum class ModelKind { fc, pglsum, pglsum_no_local, pglsum_no_global, pglsum_no_residual };

inline std::string_view to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::fc: return "fc";
        case ModelKind::pglsum: return "pglsum";
        case ModelKind::pglsum_no_local: return "pglsum_no_local";
        case ModelKind::pglsum_no_global: return "pglsum_no_global";
        case ModelKind::pglsum_no_residual: return "pglsum_no_residual";
    }
    return "?";
}

inline ModelKind parse_model_kind(std::string_view name) {
    for (auto k : {ModelKind::fc, ModelKind::pglsum, ModelKind::pglsum_no_local, ModelKind::pglsum_no_global,
                   ModelKind::pglsum_no_residual}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown model '" + std::string(name) + "'");
}

struct ModelConfig {
    ModelKind kind = ModelKind::fc;
    std::size_t input_dim = kFeatureDim;
    std::size_t hidden = 512;
    std::size_t global_heads = 8;
    std::size_t local_heads = 4;
    std::size_t windows = 4;
    double dropout = 0.5;
    double layer_norm_eps = 1e-5;

    bool attention() const { return kind != ModelKind::fc; }
    bool use_global() const { return attention() && kind != ModelKind::pglsum_no_global; }
    bool use_local() const { return attention() && kind != ModelKind::pglsum_no_local; }
    bool use_residual() const { return attention() && kind != ModelKind::pglsum_no_residual; }

    void validate() const {
        if (input_dim == 0 || hidden == 0) throw ConfigError("model widths must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
        if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
        if (attention()) {
            if (global_heads == 0 || input_dim % global_heads != 0) {
                throw ConfigError("input_dim must be divisible by global_heads");
            }
            if (local_heads == 0 || input_dim % local_heads != 0) {
                throw ConfigError("input_dim must be divisible by local_heads");
            }
            if (windows == 0) throw ConfigError("windows must be positive");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"kind", std::string(to_string(c.kind))},
         {"input_dim", c.input_dim},
         {"hidden", c.hidden},
         {"global_heads", c.global_heads},
         {"local_heads", c.local_heads},
         {"windows", c.windows},
         {"dropout", c.dropout},
         {"layer_norm_eps", c.layer_norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("kind")) c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.global_heads = j.value("global_heads", c.global_heads);
    c.local_heads = j.value("local_heads", c.local_heads);
    c.windows = j.value("windows", c.windows);
    c.dropout = j.value("dropout", c.dropout);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
}

namespace detail {

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in double.
template <class S = double>
MatrixT<S> uniform_init(Eigen::Index rows, Eigen::Index cols, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    MatrixT<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>((2.0 * uniform01(rng) - 1.0) * bound);
    return m;
}

}  // namespace detail

/// Scaled dot-product multi-head self-attention with full-width Q/K/V/O
/// projections (no biases); head h uses columns [h*dh, (h+1)*dh).
template <class S>
class MultiHeadAttention {
public:
    MultiHeadAttention(ad::BasicParameterSet<S>& params, const std::string& prefix, std::size_t dim, std::size_t heads,
                       Rng& init)
        : heads_(heads), head_dim_(dim / heads) {
        const auto d = static_cast<Eigen::Index>(dim);
        wq_ = params.add(prefix + ".wq", detail::uniform_init<S>(d, d, dim, init));
        wk_ = params.add(prefix + ".wk", detail::uniform_init<S>(d, d, dim, init));
        wv_ = params.add(prefix + ".wv", detail::uniform_init<S>(d, d, dim, init));
        wo_ = params.add(prefix + ".wo", detail::uniform_init<S>(d, d, dim, init));
    }

    ad::BasicVar<S> operator()(ad::BasicParameterSet<S>& params, ad::BasicVar<S> x) const {
        ad::BasicTape<S>& tape = x.tape();
        const ad::BasicVar<S> q = ad::matmul(x, tape.parameter(params[wq_]));
        const ad::BasicVar<S> k = ad::matmul(x, tape.parameter(params[wk_]));
        const ad::BasicVar<S> v = ad::matmul(x, tape.parameter(params[wv_]));
        const auto dh = static_cast<Eigen::Index>(head_dim_);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim_));
        std::vector<ad::BasicVar<S>> heads;
        heads.reserve(heads_);
        for (std::size_t h = 0; h < heads_; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * dh;
            const ad::BasicVar<S> qh = ad::slice_cols(q, c0, dh);
            const ad::BasicVar<S> kh = ad::slice_cols(k, c0, dh);
            const ad::BasicVar<S> vh = ad::slice_cols(v, c0, dh);
            const ad::BasicVar<S> weights = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
            heads.push_back(ad::matmul(weights, vh));
        }
        return ad::matmul(ad::concat_cols(heads), tape.parameter(params[wo_]));
    }

    std::size_t output_projection() const { return wo_; }
    std::size_t heads() const { return heads_; }
    std::size_t head_dim() const { return head_dim_; }

private:
    std::size_t heads_;
    std::size_t head_dim_;
    std::size_t wq_ = 0, wk_ = 0, wv_ = 0, wo_ = 0;
};

/// Either scoring architecture behind one interface. Parameters are created
/// in a fixed order from `seed`, so equal (config, seed) give equal models.
template <class S>
class BasicScoringModel {
public:
    BasicScoringModel(ModelConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng init(derive_seed(seed, 0x1417));
        const auto d = static_cast<Eigen::Index>(config_.input_dim);
        const auto h = static_cast<Eigen::Index>(config_.hidden);
        if (config_.use_global()) {
            global_.emplace(params_, "global", config_.input_dim, config_.global_heads, init);
        }
        if (config_.use_local()) {
            for (std::size_t w = 0; w < config_.windows; ++w) {
                local_.emplace_back(params_, "local" + std::to_string(w), config_.input_dim, config_.local_heads, init);
            }
        }
        if (config_.attention()) {
            ln1_gain_ = params_.add("ln1.gain", MatrixT<S>::Ones(1, d));
            ln1_bias_ = params_.add("ln1.bias", MatrixT<S>::Zero(1, d));
        }
        w1_ = params_.add("fc1.weight", detail::uniform_init<S>(d, h, config_.input_dim, init));
        b1_ = params_.add("fc1.bias", detail::uniform_init<S>(1, h, config_.input_dim, init));
        if (config_.attention()) {
            ln2_gain_ = params_.add("ln2.gain", MatrixT<S>::Ones(1, h));
            ln2_bias_ = params_.add("ln2.bias", MatrixT<S>::Zero(1, h));
        }
        w2_ = params_.add("fc2.weight", detail::uniform_init<S>(h, 1, config_.hidden, init));
        b2_ = params_.add("fc2.bias", detail::uniform_init<S>(1, 1, config_.hidden, init));
    }

    const ModelConfig& config() const { return config_; }
    ad::BasicParameterSet<S>& parameters() { return params_; }
    const ad::BasicParameterSet<S>& parameters() const { return params_; }

    /// Minimum number of rows accepted by forward().
    std::size_t min_rows() const { return config_.attention() ? config_.windows : 1; }

    /// (M x input_dim) -> (M x 1) scores in (0,1). `rng` drives dropout and
    /// is only consulted when `train` is set.
    ad::BasicVar<S> forward(ad::BasicVar<S> x, bool train, Rng& rng) {
        if (static_cast<std::size_t>(x.cols()) != config_.input_dim) {
            throw ShapeError("model expects " + std::to_string(config_.input_dim) + " feature columns, got " +
                             shape_string(x.value()));
        }
        if (static_cast<std::size_t>(x.rows()) < min_rows()) {
            throw ArgumentError("attention model needs at least " + std::to_string(min_rows()) + " segments, got " +
                                std::to_string(x.rows()));
        }
        ad::BasicTape<S>& tape = x.tape();
        const auto p = [&](std::size_t index) { return tape.parameter(params_[index]); };
        if (!config_.attention()) {
            ad::BasicVar<S> hidden = ad::relu(ad::add_row(ad::matmul(x, p(w1_)), p(b1_)));
            hidden = ad::dropout(hidden, config_.dropout, rng, train);
            return ad::sigmoid(ad::add_row(ad::matmul(hidden, p(w2_)), p(b2_)));
        }

        std::vector<ad::BasicVar<S>> terms;
        if (global_) terms.push_back((*global_)(params_, x));
        if (!local_.empty()) {
            const auto edges = bin_edges(static_cast<std::size_t>(x.rows()), local_.size());
            std::vector<ad::BasicVar<S>> parts;
            for (std::size_t w = 0; w < local_.size(); ++w) {
                const auto begin = static_cast<Eigen::Index>(edges[w]);
                const auto count = static_cast<Eigen::Index>(edges[w + 1] - edges[w]);
                parts.push_back(local_[w](params_, ad::slice_rows(x, begin, count)));
            }
            terms.push_back(ad::concat_rows(parts));
        }
        if (config_.use_residual()) terms.push_back(x);
        ad::BasicVar<S> z = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) z = ad::add(z, terms[i]);

        ad::BasicVar<S> y = ad::dropout(z, config_.dropout, rng, train);
        y = ad::add_row(ad::mul_row(ad::layer_norm_rows(y, config_.layer_norm_eps), p(ln1_gain_)), p(ln1_bias_));
        y = ad::relu(ad::add_row(ad::matmul(y, p(w1_)), p(b1_)));
        y = ad::dropout(y, config_.dropout, rng, train);
        y = ad::add_row(ad::mul_row(ad::layer_norm_rows(y, config_.layer_norm_eps), p(ln2_gain_)), p(ln2_bias_));
        return ad::sigmoid(ad::add_row(ad::matmul(y, p(w2_)), p(b2_)));
    }

    /// Eval-mode scores; dropout-free and deterministic.
    ScoreVector score(const MatrixT<S>& features) {
        ad::BasicTape<S> tape;
        Rng unused(0);
        const ad::BasicVar<S> out = forward(tape.input(features), false, unused);
        const MatrixT<S>& v = out.value();
        ScoreVector scores(static_cast<std::size_t>(v.size()));
        for (Eigen::Index i = 0; i < v.size(); ++i) scores[static_cast<std::size_t>(i)] = static_cast<double>(v.data()[i]);
        return scores;
    }

    /// Same architecture with every parameter converted to scalar type T.
    template <class T>
    BasicScoringModel<T> cast() const {
        BasicScoringModel<T> out(config_, 0);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.parameters()[i].value = params_[i].value.template cast<T>();
        }
        return out;
    }

    /// Indices of the attention output projections (global first, then
    /// local windows in order).
    std::vector<std::size_t> attention_output_projections() const {
        std::vector<std::size_t> out;
        if (global_) out.push_back(global_->output_projection());
        for (const auto& m : local_) out.push_back(m.output_projection());
        return out;
    }

private:
    ModelConfig config_;
    ad::BasicParameterSet<S> params_;
    std::optional<MultiHeadAttention<S>> global_;
    std::vector<MultiHeadAttention<S>> local_;
    std::size_t ln1_gain_ = 0, ln1_bias_ = 0, ln2_gain_ = 0, ln2_bias_ = 0;
    std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
};

using ScoringModel = BasicScoringModel<double>;

}  // namespace mrp
