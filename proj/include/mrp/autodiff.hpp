#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Every operation appends a node to a Tape; backward() walks the tape in
// reverse creation order, which is a reverse topological order by
// construction. Gradients are accumulated, never overwritten, so a value
// consumed by several operations receives the sum of its contributions.
//
// Everything is templated on the scalar type; training uses double, and the
// gradient checks re-evaluate in long double to keep rounding noise out of the
// finite differences.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "mrp/common.hpp"
#include "mrp/rng.hpp"

namespace mrp::ad {

/// A trainable tensor. `grad` accumulates across backward passes until
/// zeroed.
template <class S>
struct BasicParameter {
    std::string name;
    MatrixT<S> value;
    MatrixT<S> grad;

    BasicParameter(std::string n, MatrixT<S> v)
        : name(std::move(n)), value(std::move(v)), grad(MatrixT<S>::Zero(value.rows(), value.cols())) {}
};

/// Ordered, address-stable collection of parameters. Order is creation
/// order and is part of the checkpoint and optimizer contract.
template <class S>
class BasicParameterSet {
public:
    std::size_t add(std::string name, MatrixT<S> init) {
        for (const auto& p : params_) {
            if (p.name == name) throw ArgumentError("duplicate parameter name '" + name + "'");
        }
        params_.emplace_back(std::move(name), std::move(init));
        return params_.size() - 1;
    }

    BasicParameter<S>& operator[](std::size_t i) { return params_[i]; }
    const BasicParameter<S>& operator[](std::size_t i) const { return params_[i]; }

    BasicParameter<S>* find(std::string_view name) {
        for (auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    const BasicParameter<S>* find(std::string_view name) const {
        for (const auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad.setZero();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::deque<BasicParameter<S>> params_;
};

template <class S>
class BasicTape;

/// Handle to a node on a BasicTape<S>. Cheap to copy; valid while the tape lives.
template <class S>
class BasicVar {
public:
    BasicVar() = default;

    const MatrixT<S>& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    BasicTape<S>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }

private:
    friend class BasicTape<S>;
    BasicVar(BasicTape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

    BasicTape<S>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class S>
class BasicTape {
public:
    using BackwardFn = std::function<void(BasicTape<S>&, std::size_t self)>;

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    /// Non-differentiable view of caller-owned data; `m` must outlive the tape.
    BasicVar<S> input(const MatrixT<S>& m) {
        Node& n = nodes_.emplace_back();
        n.external = &m;
        return {this, nodes_.size() - 1};
    }

    BasicVar<S> constant(MatrixT<S> m) {
        Node& n = nodes_.emplace_back();
        n.owned = std::move(m);
        return {this, nodes_.size() - 1};
    }

    /// Differentiable leaf; read its gradient with grad() after backward().
    BasicVar<S> variable(MatrixT<S> m) {
        Node& n = nodes_.emplace_back();
        n.owned = std::move(m);
        n.requires_grad = true;
        return {this, nodes_.size() - 1};
    }

    /// Leaf bound to a parameter; backward() adds into `p.grad`.
    BasicVar<S> parameter(BasicParameter<S>& p) {
        Node& n = nodes_.emplace_back();
        n.external = &p.value;
        n.param = &p;
        n.requires_grad = true;
        return {this, nodes_.size() - 1};
    }

    /// Appends an operation result. `fn` runs during backward() only when
    /// some parent requires a gradient.
    BasicVar<S> record(MatrixT<S> value, std::initializer_list<BasicVar<S>> parents, BackwardFn fn) {
        return record(std::move(value), std::span<const BasicVar<S>>(parents.begin(), parents.size()), std::move(fn));
    }

    BasicVar<S> record(MatrixT<S> value, std::span<const BasicVar<S>> parents, BackwardFn fn) {
        bool needs = false;
        for (const BasicVar<S>& p : parents) {
            if (p.tape_ != this) throw ArgumentError("operands belong to different tapes");
            needs = needs || nodes_[p.id_].requires_grad;
        }
        Node& n = nodes_.emplace_back();
        n.owned = std::move(value);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(fn);
        return {this, nodes_.size() - 1};
    }

    const MatrixT<S>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Upstream gradient of node `id` during backward().
    const MatrixT<S>& upstream(std::size_t id) const { return nodes_[id].grad; }

    template <typename Derived>
    void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.param) {
            // parameter leaves add straight into Parameter::grad
            n.param->grad.noalias() += g;
            return;
        }
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    /// Gradient of the last backward() with respect to `v` (zeros if none
    /// flowed). Parameter leaves report zeros; read Parameter::grad instead.
    MatrixT<S> grad(BasicVar<S> v) const {
        const Node& n = nodes_[v.id_];
        if (n.has_grad) return n.grad;
        const MatrixT<S>& val = value(v.id_);
        return MatrixT<S>::Zero(val.rows(), val.cols());
    }

    void backward(BasicVar<S> loss) {
        const MatrixT<S>& lv = value(loss.id_);
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ArgumentError("backward() needs a scalar loss, got " + shape_string(lv));
        }
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad.resize(0, 0);
        }
        if (!nodes_[loss.id_].requires_grad) return;
        accumulate(loss.id_, MatrixT<S>::Ones(1, 1));
        for (std::size_t id = loss.id_ + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.has_grad) continue;
            if (n.backward) n.backward(*this, id);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    /// Hash of the branch taken by every piecewise operation so far (ReLU
    /// sign patterns). Two evaluations with equal signatures lie on the same
    /// smooth piece, which finite-difference checks rely on.
    std::uint64_t nonsmooth_signature() const { return signature_; }
    void mix_signature(std::uint64_t bits) { signature_ = splitmix64(signature_ ^ bits); }

private:
    struct Node {
        MatrixT<S> owned;
        const MatrixT<S>* external = nullptr;
        MatrixT<S> grad;
        bool has_grad = false;
        bool requires_grad = false;
        BasicParameter<S>* param = nullptr;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
    std::uint64_t signature_ = 0;
};

template <class S>
const MatrixT<S>& BasicVar<S>::value() const { return tape_->value(id_); }

namespace detail {

template <class S>
void require_same_shape(const char* op, const MatrixT<S>& a, const MatrixT<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
    }
}

template <class S>
void require_row(const char* op, const MatrixT<S>& a, const MatrixT<S>& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError(std::string(op) + ": row operand " + shape_string(row) + " does not match " +
                         shape_string(a));
    }
}

}  // namespace detail

template <class S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b) {
    const MatrixT<S>& av = a.value();
    const MatrixT<S>& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: " + shape_string(av) + " x " + shape_string(bv));
    }
    MatrixT<S> out = av * bv;
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

/// a * b^T
template <class S>
BasicVar<S> matmul_nt(BasicVar<S> a, BasicVar<S> b) {
    const MatrixT<S>& av = a.value();
    const MatrixT<S>& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw ShapeError("matmul_nt: " + shape_string(av) + " x " + shape_string(bv) + "^T");
    }
    MatrixT<S> out = av * bv.transpose();
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
        if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
    });
}

template <class S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b) {
    detail::require_same_shape("add", a.value(), b.value());
    MatrixT<S> out = a.value() + b.value();
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, t.upstream(self));
        t.accumulate(ib, t.upstream(self));
    });
}

/// Adds a 1 x C row to every row of `a`.
template <class S>
BasicVar<S> add_row(BasicVar<S> a, BasicVar<S> row) {
    detail::require_row("add_row", a.value(), row.value());
    MatrixT<S> out = a.value().rowwise() + row.value().row(0);
    const auto ia = a.id(), ir = row.id();
    return a.tape().record(std::move(out), {a, row}, [ia, ir](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, t.upstream(self));
        if (t.requires_grad(ir)) t.accumulate(ir, t.upstream(self).colwise().sum());
    });
}

/// Scales every row of `a` elementwise by a 1 x C row.
template <class S>
BasicVar<S> mul_row(BasicVar<S> a, BasicVar<S> row) {
    detail::require_row("mul_row", a.value(), row.value());
    MatrixT<S> out = a.value().array().rowwise() * row.value().row(0).array();
    const auto ia = a.id(), ir = row.id();
    return a.tape().record(std::move(out), {a, row}, [ia, ir](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        if (t.requires_grad(ia)) {
            t.accumulate(ia, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
        }
        if (t.requires_grad(ir)) t.accumulate(ir, (g.array() * t.value(ia).array()).colwise().sum().matrix());
    });
}

template <class S>
BasicVar<S> scale(BasicVar<S> a, double factor) {
    const S s = static_cast<S>(factor);
    MatrixT<S> out = a.value() * s;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, s](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, t.upstream(self) * s);
    });
}

template <class S>
BasicVar<S> relu(BasicVar<S> a) {
    const MatrixT<S>& av = a.value();
    MatrixT<S> out = av.cwiseMax(S(0));
    std::uint64_t bits = 0;
    for (Eigen::Index i = 0; i < av.size(); ++i) {
        bits = bits * 0x100000001b3ULL + (av.data()[i] > S(0) ? 1u : 2u);
    }
    a.tape().mix_signature(bits);
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& x = t.value(ia);
        t.accumulate(ia, (x.array() > S(0)).select(t.upstream(self), S(0)).matrix());
    });
}

template <class S>
BasicVar<S> sigmoid(BasicVar<S> a) {
    MatrixT<S> out = a.value().unaryExpr([](S x) {
        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
        const S e = std::exp(x);
        return e / (S(1) + e);
    });
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](BasicTape<S>& t, std::size_t self) {
        const auto y = t.value(self).array();
        t.accumulate(ia, (t.upstream(self).array() * y * (S(1) - y)).matrix());
    });
}

/// Row-wise softmax.
template <class S>
BasicVar<S> softmax_rows(BasicVar<S> a) {
    const MatrixT<S>& av = a.value();
    MatrixT<S> out(av.rows(), av.cols());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
        const S m = av.row(r).maxCoeff();
        out.row(r) = (av.row(r).array() - m).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& y = t.value(self);
        const MatrixT<S>& g = t.upstream(self);
        const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (g.array() * y.array()).rowwise().sum();
        t.accumulate(ia, (y.array() * (g.colwise() - dots).array()).matrix());
    });
}

/// Row-wise normalization to zero mean and unit (biased) variance, without
/// affine terms. A constant row maps to zeros.
template <class S>
BasicVar<S> layer_norm_rows(BasicVar<S> a, double eps) {
    if (!(eps > 0.0)) throw ArgumentError("layer_norm eps must be positive");
    const MatrixT<S>& av = a.value();
    const auto n = static_cast<S>(av.cols());
    MatrixT<S> xhat(av.rows(), av.cols());
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(av.rows());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
        const S mean = av.row(r).mean();
        const S var = (av.row(r).array() - mean).square().sum() / n;
        inv_std(r) = S(1) / std::sqrt(var + static_cast<S>(eps));
        xhat.row(r) = (av.row(r).array() - mean) * inv_std(r);
    }
    const auto ia = a.id();
    return a.tape().record(std::move(xhat), {a}, [ia, inv_std, n](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& y = t.value(self);
        const MatrixT<S>& g = t.upstream(self);
        MatrixT<S> dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const S sum_g = g.row(r).sum();
            const S sum_gy = g.row(r).dot(y.row(r));
            dx.row(r) = (inv_std(r) / n) * (n * g.row(r).array() - sum_g - y.row(r).array() * sum_gy);
        }
        t.accumulate(ia, dx);
    });
}

/// Inverted dropout. In train mode each entry is zeroed with probability p
/// and survivors are scaled by 1/(1-p); otherwise returns `a` unchanged.
template <class S>
BasicVar<S> dropout(BasicVar<S> a, double p, Rng& rng, bool train) {
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout probability must lie in [0, 1)");
    if (!train || p == 0.0) return a;
    const MatrixT<S>& av = a.value();
    MatrixT<S> mask(av.rows(), av.cols());
    const S keep_scale = S(1) / (S(1) - static_cast<S>(p));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(rng) >= p ? keep_scale : S(0);
    MatrixT<S> out = av.cwiseProduct(mask);
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, mask = std::move(mask)](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, t.upstream(self).cwiseProduct(mask));
    });
}

/// Scalar mean of all entries.
template <class S>
BasicVar<S> mean(BasicVar<S> a) {
    const MatrixT<S>& av = a.value();
    if (av.size() == 0) throw ShapeError("mean of an empty matrix");
    MatrixT<S> out(1, 1);
    out(0, 0) = av.mean();
    const auto ia = a.id();
    const auto rows = av.rows(), cols = av.cols();
    return a.tape().record(std::move(out), {a}, [ia, rows, cols](BasicTape<S>& t, std::size_t self) {
        const S g = t.upstream(self)(0, 0) / static_cast<S>(rows * cols);
        t.accumulate(ia, MatrixT<S>::Constant(rows, cols, g));
    });
}

/// Column-wise mean over rows: (R x C) -> (1 x C).
template <class S>
BasicVar<S> mean_rows(BasicVar<S> a) {
    const MatrixT<S>& av = a.value();
    if (av.rows() == 0) throw ShapeError("mean_rows of a matrix without rows");
    MatrixT<S> out = av.colwise().mean();
    const auto ia = a.id();
    const auto rows = av.rows();
    return a.tape().record(std::move(out), {a}, [ia, rows](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        t.accumulate(ia, g.replicate(rows, 1) / static_cast<S>(rows));
    });
}

/// Scalar sum of a elementwise-weighted by a constant matrix.
template <class S>
BasicVar<S> weighted_sum(BasicVar<S> a, const std::type_identity_t<MatrixT<S>>& weights) {
    detail::require_same_shape("weighted_sum", a.value(), weights);
    MatrixT<S> out(1, 1);
    out(0, 0) = a.value().cwiseProduct(weights).sum();
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, weights](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, weights * t.upstream(self)(0, 0));
    });
}

template <class S>
BasicVar<S> slice_rows(BasicVar<S> a, Eigen::Index begin, Eigen::Index count) {
    const MatrixT<S>& av = a.value();
    if (begin < 0 || count < 0 || begin + count > av.rows()) {
        throw ShapeError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(av));
    }
    MatrixT<S> out = av.middleRows(begin, count);
    const auto ia = a.id();
    const auto rows = av.rows(), cols = av.cols();
    return a.tape().record(std::move(out), {a}, [ia, begin, count, rows, cols](BasicTape<S>& t, std::size_t self) {
        MatrixT<S> g = MatrixT<S>::Zero(rows, cols);
        g.middleRows(begin, count) = t.upstream(self);
        t.accumulate(ia, g);
    });
}

template <class S>
BasicVar<S> slice_cols(BasicVar<S> a, Eigen::Index begin, Eigen::Index count) {
    const MatrixT<S>& av = a.value();
    if (begin < 0 || count < 0 || begin + count > av.cols()) {
        throw ShapeError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(av));
    }
    MatrixT<S> out = av.middleCols(begin, count);
    const auto ia = a.id();
    const auto rows = av.rows(), cols = av.cols();
    return a.tape().record(std::move(out), {a}, [ia, begin, count, rows, cols](BasicTape<S>& t, std::size_t self) {
        MatrixT<S> g = MatrixT<S>::Zero(rows, cols);
        g.middleCols(begin, count) = t.upstream(self);
        t.accumulate(ia, g);
    });
}

template <class S>
BasicVar<S> concat_rows(const std::vector<BasicVar<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const auto cols = parts[0].cols();
    Eigen::Index rows = 0;
    for (const BasicVar<S>& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: " + shape_string(parts[0].value()) + " and " + shape_string(p.value()));
        }
        rows += p.rows();
    }
    MatrixT<S> out(rows, cols);
    std::vector<std::pair<std::size_t, Eigen::Index>> pieces;  // (node id, row count)
    Eigen::Index at = 0;
    for (const BasicVar<S>& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        pieces.emplace_back(p.id(), p.rows());
        at += p.rows();
    }
    return parts[0].tape().record(std::move(out), parts, [pieces](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        Eigen::Index offset = 0;
        for (const auto& [id, rows] : pieces) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleRows(offset, rows));
            offset += rows;
        }
    });
}

template <class S>
BasicVar<S> concat_cols(const std::vector<BasicVar<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const auto rows = parts[0].rows();
    Eigen::Index cols = 0;
    for (const BasicVar<S>& p : parts) {
        if (p.rows() != rows) {
            throw ShapeError("concat_cols: " + shape_string(parts[0].value()) + " and " + shape_string(p.value()));
        }
        cols += p.cols();
    }
    MatrixT<S> out(rows, cols);
    std::vector<std::pair<std::size_t, Eigen::Index>> pieces;  // (node id, column count)
    Eigen::Index at = 0;
    for (const BasicVar<S>& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        pieces.emplace_back(p.id(), p.cols());
        at += p.cols();
    }
    return parts[0].tape().record(std::move(out), parts, [pieces](BasicTape<S>& t, std::size_t self) {
        const MatrixT<S>& g = t.upstream(self);
        Eigen::Index offset = 0;
        for (const auto& [id, cols] : pieces) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleCols(offset, cols));
            offset += cols;
        }
    });
}

/// Scalar node whose value and gradient with respect to `a` were computed
/// outside the tape (e.g. a pairwise loss with its own exact subgradient).
template <class S>
BasicVar<S> external_scalar(BasicVar<S> a, std::type_identity_t<S> value, std::type_identity_t<MatrixT<S>> grad_wrt_a) {
    detail::require_same_shape("external_scalar", a.value(), grad_wrt_a);
    MatrixT<S> out(1, 1);
    out(0, 0) = value;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, g = std::move(grad_wrt_a)](BasicTape<S>& t, std::size_t self) {
        t.accumulate(ia, g * t.upstream(self)(0, 0));
    });
}

using Parameter = BasicParameter<double>;
using ParameterSet = BasicParameterSet<double>;
using Tape = BasicTape<double>;
using Var = BasicVar<double>;

}  // namespace mrp::ad
