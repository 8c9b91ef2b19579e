#include <gtest/gtest.h>

#include <cmath>

#include "mrp/models.hpp"
#include "support/gradcheck.hpp"

namespace mrp {
namespace {

ModelConfig toy(ModelKind kind, std::size_t dim = 16, std::size_t hidden = 8) {
    ModelConfig c;
    c.kind = kind;
    c.input_dim = dim;
    c.hidden = hidden;
    return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
    return m;
}

const Matrix& param(const ScoringModel& m, const std::string& name) {
    const auto* p = m.parameters().find(name);
    if (!p) throw std::runtime_error("no parameter " + name);
    return p->value;
}

// Straight-line recomputation from named parameters, eval mode.

Matrix oracle_sigmoid(const Matrix& z) { return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }); }

Matrix oracle_layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(r, c);
        mu /= static_cast<double>(x.cols());
        double var = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
        var /= static_cast<double>(x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            out(r, c) = (x(r, c) - mu) / std::sqrt(var + eps) * gain(0, c) + bias(0, c);
        }
    }
    return out;
}

Matrix oracle_attention(const ScoringModel& m, const std::string& prefix, const Matrix& x, std::size_t heads) {
    const Matrix q = x * param(m, prefix + ".wq");
    const Matrix k = x * param(m, prefix + ".wk");
    const Matrix v = x * param(m, prefix + ".wv");
    const Eigen::Index dh = x.cols() / static_cast<Eigen::Index>(heads);
    Matrix cat(x.rows(), x.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            std::vector<double> w(static_cast<std::size_t>(x.rows()));
            double mx = -1e300;
            for (Eigen::Index j = 0; j < x.rows(); ++j) {
                double s = 0.0;
                for (Eigen::Index c = 0; c < dh; ++c) s += q(i, c0 + c) * k(j, c0 + c);
                w[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, w[j]);
            }
            double z = 0.0;
            for (auto& e : w) z += (e = std::exp(e - mx));
            for (Eigen::Index c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (Eigen::Index j = 0; j < x.rows(); ++j) acc += w[j] / z * v(j, c0 + c);
                cat(i, c0 + c) = acc;
            }
        }
    }
    return cat * param(m, prefix + ".wo");
}

Matrix oracle_fc(const ScoringModel& m, const Matrix& x) {
    Matrix h = x * param(m, "fc1.weight");
    h.rowwise() += param(m, "fc1.bias").row(0);
    h = h.cwiseMax(0.0);
    Matrix o = h * param(m, "fc2.weight");
    o.array() += param(m, "fc2.bias")(0, 0);
    return oracle_sigmoid(o);
}

Matrix oracle_stack(const ScoringModel& m, const Matrix& z) {
    const double eps = m.config().layer_norm_eps;
    Matrix y = oracle_layer_norm(z, param(m, "ln1.gain"), param(m, "ln1.bias"), eps);
    y = y * param(m, "fc1.weight");
    y.rowwise() += param(m, "fc1.bias").row(0);
    y = y.cwiseMax(0.0);
    y = oracle_layer_norm(y, param(m, "ln2.gain"), param(m, "ln2.bias"), eps);
    Matrix o = y * param(m, "fc2.weight");
    o.array() += param(m, "fc2.bias")(0, 0);
    return oracle_sigmoid(o);
}

Matrix oracle_pglsum(const ScoringModel& m, const Matrix& x) {
    const auto& c = m.config();
    Matrix z = Matrix::Zero(x.rows(), x.cols());
    if (c.use_global()) z += oracle_attention(m, "global", x, c.global_heads);
    if (c.use_local()) {
        const auto n = static_cast<std::size_t>(x.rows());
        for (std::size_t w = 0; w < c.windows; ++w) {
            const auto b = static_cast<Eigen::Index>(w * n / c.windows);
            const auto e = static_cast<Eigen::Index>((w + 1) * n / c.windows);
            z.middleRows(b, e - b) += oracle_attention(m, "local" + std::to_string(w), x.middleRows(b, e - b), c.local_heads);
        }
    }
    if (c.use_residual()) z += x;
    return oracle_stack(m, z);
}

Matrix as_column(const ScoreVector& s) { return Eigen::Map<const Matrix>(s.data(), static_cast<Eigen::Index>(s.size()), 1); }

// Moves LayerNorm affine terms away from (1, 0) so they take part in checks.
void randomize_norms(ScoringModel& m, Rng& rng) {
    for (auto& p : m.parameters()) {
        if (p.name.rfind("ln", 0) != 0) continue;
        const bool gain = p.name.find("gain") != std::string::npos;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            p.value.data()[i] = (gain ? 1.0 : 0.0) + 0.2 * standard_normal(rng);
        }
    }
}

TEST(Fc, ZeroWeightsGiveHalf) {
    ScoringModel m(toy(ModelKind::fc), 1);
    for (auto& p : m.parameters()) p.value.setZero();
    Rng rng(2);
    for (double s : m.score(random_matrix(9, 16, rng))) EXPECT_EQ(s, 0.5);
}

TEST(Fc, RowPermutationEquivariant) {
    ScoringModel m(toy(ModelKind::fc), 3);
    Rng rng(4);
    const Matrix x = random_matrix(12, 16, rng);
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix px(12, 16);
    for (int i = 0; i < 12; ++i) px.row(i) = x.row(perm[i]);
    const auto a = m.score(x);
    const auto b = m.score(px);
    for (int i = 0; i < 12; ++i) EXPECT_EQ(b[i], a[perm[i]]);
}

TEST(Fc, MatchesOracle) {
    ScoringModel m(toy(ModelKind::fc, 32, 12), 5);
    Rng rng(6);
    const Matrix x = random_matrix(10, 32, rng);
    EXPECT_TRUE(as_column(m.score(x)).isApprox(oracle_fc(m, x), 1e-12));
}

TEST(Fc, FullWidthDefaults) {
    ScoringModel m(ModelConfig{}, 7);
    EXPECT_EQ(param(m, "fc1.weight").rows(), 1024);
    EXPECT_EQ(param(m, "fc1.weight").cols(), 512);
    const double bound = 1.0 / 32.0;
    EXPECT_LE(param(m, "fc1.weight").cwiseAbs().maxCoeff(), bound);
    Rng rng(1);
    const Matrix x = random_matrix(5, 1024, rng);
    const auto s = m.score(x);
    ASSERT_EQ(s.size(), 5u);
    for (double v : s) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_THROW(m.score(random_matrix(5, 1023, rng)), ShapeError);
}

TEST(Pglsum, MatchesOracleAllKinds) {
    for (auto kind : {ModelKind::pglsum, ModelKind::pglsum_no_local, ModelKind::pglsum_no_global,
                      ModelKind::pglsum_no_residual}) {
        ScoringModel m(toy(kind), 11);
        Rng rng(12);
        randomize_norms(m, rng);
        for (Eigen::Index rows : {8, 11}) {
            const Matrix x = random_matrix(rows, 16, rng);
            EXPECT_TRUE(as_column(m.score(x)).isApprox(oracle_pglsum(m, x), 1e-12)) << to_string(kind) << " " << rows;
        }
    }
}

TEST(Pglsum, ZeroOutputProjectionsReduceToStack) {
    ScoringModel m(toy(ModelKind::pglsum), 13);
    for (auto i : m.attention_output_projections()) m.parameters()[i].value.setZero();
    EXPECT_EQ(m.attention_output_projections().size(), 5u);
    Rng rng(14);
    const Matrix x = random_matrix(9, 16, rng);
    EXPECT_TRUE(as_column(m.score(x)).isApprox(oracle_stack(m, x), 1e-13));
}

TEST(Pglsum, ConstantRowsGiveEqualScores) {
    // Each window has its own local module, so equality holds per window, and
    // across the whole sequence once the window modules share weights.
    ScoringModel m(toy(ModelKind::pglsum), 15);
    Rng rng(16);
    Matrix x(10, 16);
    x.rowwise() = random_matrix(1, 16, rng).row(0);
    auto s = m.score(x);
    const auto edges = bin_edges(10, 4);
    for (std::size_t w = 0; w < 4; ++w) {
        for (std::size_t i = edges[w]; i < edges[w + 1]; ++i) EXPECT_NEAR(s[i], s[edges[w]], 1e-14);
    }
    for (std::size_t w = 1; w < 4; ++w) {
        for (const char* part : {".wq", ".wk", ".wv", ".wo"}) {
            m.parameters().find("local" + std::to_string(w) + part)->value = param(m, std::string("local0") + part);
        }
    }
    s = m.score(x);
    for (double v : s) EXPECT_NEAR(v, s[0], 1e-14);

    ScoringModel no_local(toy(ModelKind::pglsum_no_local), 15);
    const auto t = no_local.score(x);
    for (double v : t) EXPECT_NEAR(v, t[0], 1e-14);
}

TEST(Pglsum, NotPermutationEquivariant) {
    // Moving a row into a different local window changes its context.
    ScoringModel m(toy(ModelKind::pglsum), 17);
    Rng rng(18);
    const Matrix x = random_matrix(8, 16, rng);
    Matrix swapped = x;
    swapped.row(0).swap(swapped.row(7));
    const auto a = m.score(x);
    const auto b = m.score(swapped);
    EXPECT_GT(std::abs(a[0] - b[7]), 1e-9);
}

TEST(Pglsum, AblationsAreDistinct) {
    ScoringModel full(toy(ModelKind::pglsum), 19);
    Rng rng(20);
    randomize_norms(full, rng);
    const Matrix x = random_matrix(8, 16, rng);
    std::vector<ScoreVector> outs{full.score(x)};
    for (auto kind : {ModelKind::pglsum_no_local, ModelKind::pglsum_no_global, ModelKind::pglsum_no_residual}) {
        ScoringModel ab(toy(kind), 19);
        for (auto& p : ab.parameters()) p.value = param(full, p.name);
        outs.push_back(ab.score(x));
    }
    for (std::size_t i = 0; i < outs.size(); ++i) {
        for (std::size_t j = i + 1; j < outs.size(); ++j) {
            double diff = 0.0;
            for (std::size_t r = 0; r < outs[i].size(); ++r) diff = std::max(diff, std::abs(outs[i][r] - outs[j][r]));
            EXPECT_GT(diff, 1e-6) << i << " vs " << j;
        }
    }
}

TEST(Pglsum, ParameterInventory) {
    ScoringModel full(ModelConfig{.kind = ModelKind::pglsum}, 1);
    EXPECT_EQ(param(full, "global.wq").rows(), 1024);
    EXPECT_NE(full.parameters().find("local3.wo"), nullptr);
    EXPECT_EQ(full.parameters().find("local4.wo"), nullptr);
    EXPECT_EQ(param(full, "ln1.gain"), Matrix::Ones(1, 1024));
    ScoringModel no_local(ModelConfig{.kind = ModelKind::pglsum_no_local}, 1);
    EXPECT_EQ(no_local.parameters().find("local0.wq"), nullptr);
    ScoringModel no_global(ModelConfig{.kind = ModelKind::pglsum_no_global}, 1);
    EXPECT_EQ(no_global.parameters().find("global.wq"), nullptr);
}

TEST(Pglsum, RejectsShortOrWrongWidth) {
    ScoringModel m(toy(ModelKind::pglsum), 21);
    Rng rng(22);
    EXPECT_THROW(m.score(random_matrix(3, 16, rng)), ArgumentError);
    EXPECT_NO_THROW(m.score(random_matrix(4, 16, rng)));
    EXPECT_THROW(m.score(random_matrix(6, 15, rng)), ShapeError);
}

TEST(Models, SameSeedSameParameters) {
    ScoringModel a(toy(ModelKind::pglsum), 5), b(toy(ModelKind::pglsum), 5), c(toy(ModelKind::pglsum), 6);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    }
    EXPECT_NE(a.parameters()[0].value, c.parameters()[0].value);
}

TEST(Models, EvalDeterministicTrainStochastic) {
    ScoringModel m(toy(ModelKind::pglsum), 23);
    Rng rng(24);
    const Matrix x = random_matrix(8, 16, rng);
    EXPECT_EQ(m.score(x), m.score(x));
    ad::Tape t1, t2;
    Rng d1(1), d2(2);
    const Matrix a = m.forward(t1.input(x), true, d1).value();
    const Matrix b = m.forward(t2.input(x), true, d2).value();
    EXPECT_NE(a, b);
}

TEST(Models, ConfigValidation) {
    ModelConfig c = toy(ModelKind::pglsum, 18);
    EXPECT_THROW(ScoringModel(c, 0), ConfigError);  // 18 not divisible by 8 heads
    c = toy(ModelKind::fc);
    c.dropout = 1.0;
    EXPECT_THROW(ScoringModel(c, 0), ConfigError);
    EXPECT_THROW(parse_model_kind("transformer"), ConfigError);
    const ModelConfig round = nlohmann::json(toy(ModelKind::pglsum_no_global)).get<ModelConfig>();
    EXPECT_EQ(round.kind, ModelKind::pglsum_no_global);
    EXPECT_EQ(round.input_dim, 16u);
}

TEST(Models, GradientsMatchFiniteDifferences) {
    for (auto kind : {ModelKind::fc, ModelKind::pglsum, ModelKind::pglsum_no_residual}) {
        for (std::uint64_t trial = 0; trial < 4; ++trial) {
            ScoringModel m(toy(kind), 100 + trial);
            Rng rng(200 + trial);
            randomize_norms(m, rng);
            auto ref = m.cast<long double>();
            const Matrix x = random_matrix(6 + static_cast<Eigen::Index>(trial), 16, rng);
            const Matrix w = random_matrix(x.rows(), 1, rng);
            const MatrixT<long double> xl = x.cast<long double>();
            const MatrixT<long double> wl = w.cast<long double>();
            const auto r = testing::check_gradients(
                m.parameters(), ref.parameters(),
                [&](ad::Tape& t) {
                    Rng drop(trial);
                    return ad::weighted_sum(m.forward(t.input(x), true, drop), w);
                },
                [&](ad::BasicTape<long double>& t) {
                    Rng drop(trial);
                    return ad::weighted_sum(ref.forward(t.input(xl), true, drop), wl);
                },
                rng);
            EXPECT_LE(r.max_error, 1e-4) << to_string(kind) << " " << r.worst;
            EXPECT_GT(r.checked, 40u);
        }
    }
}

}  // namespace
}  // namespace mrp
