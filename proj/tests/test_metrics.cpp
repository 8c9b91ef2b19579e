#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "mrp/metrics.hpp"

namespace mrp {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

RankingOf random_ranking(std::size_t m, Rng& rng) {
    RankingOf r;
    r.order.resize(m);
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::shuffle(r.order.begin(), r.order.end(), rng);
    return r;
}

double precision_oracle(const RankingOf& pred, const RankingOf& gt, std::size_t k) {
    std::set<std::size_t> a(pred.order.begin(), pred.order.begin() + static_cast<std::ptrdiff_t>(k));
    std::size_t hits = 0;
    for (std::size_t r = 0; r < k; ++r) hits += a.count(gt.order[r]);
    return static_cast<double>(hits) / static_cast<double>(k);
}

double tau_oracle(const RankingOf& a, const RankingOf& b) {
    const auto pa = a.positions(), pb = b.positions();
    const std::size_t m = a.size();
    long c = 0, d = 0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i + 1; j < m; ++j) {
            const bool x = pa[i] < pa[j], y = pb[i] < pb[j];
            (x == y ? c : d) += 1;
        }
    }
    return static_cast<double>(c - d) / (static_cast<double>(m * (m - 1)) / 2.0);
}

// Direct pairwise form: observed disagreement over all within-item pairs,
// expected disagreement over all pairs of pairable values.
double alpha_oracle(const Matrix& ratings, AlphaMetric metric) {
    std::vector<std::vector<double>> units;
    std::vector<double> pool;
    for (Eigen::Index c = 0; c < ratings.cols(); ++c) {
        std::vector<double> u;
        for (Eigen::Index r = 0; r < ratings.rows(); ++r) {
            if (!std::isnan(ratings(r, c))) u.push_back(ratings(r, c));
        }
        if (u.size() >= 2) {
            pool.insert(pool.end(), u.begin(), u.end());
            units.push_back(std::move(u));
        }
    }
    auto count = [&](double v) { return static_cast<double>(std::count(pool.begin(), pool.end(), v)); };
    auto delta2 = [&](double a, double b) {
        if (a == b) return 0.0;
        switch (metric) {
            case AlphaMetric::nominal: return 1.0;
            case AlphaMetric::interval: return (a - b) * (a - b);
            case AlphaMetric::ordinal: {
                const double lo = std::min(a, b), hi = std::max(a, b);
                std::set<double> between;
                for (double v : pool) {
                    if (v >= lo && v <= hi) between.insert(v);
                }
                double s = 0.0;
                for (double g : between) s += count(g);
                s -= (count(a) + count(b)) / 2.0;
                return s * s;
            }
        }
        return 0.0;
    };
    double obs = 0.0;
    for (const auto& u : units) {
        double within = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            for (std::size_t j = 0; j < u.size(); ++j) {
                if (i != j) within += delta2(u[i], u[j]);
            }
        }
        obs += within / static_cast<double>(u.size() - 1);
    }
    double exp = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        for (std::size_t j = 0; j < pool.size(); ++j) {
            if (i != j) exp += delta2(pool[i], pool[j]);
        }
    }
    return 1.0 - (static_cast<double>(pool.size()) - 1.0) * obs / exp;
}

Matrix rank_rows(const std::vector<RankingOf>& rs) {
    Matrix m(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(rs.front().size()));
    for (std::size_t r = 0; r < rs.size(); ++r) {
        const auto pos = rs[r].positions();
        for (std::size_t i = 0; i < pos.size(); ++i) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = pos[i] + 1.0;
    }
    return m;
}

TEST(Ranking, FromScores) {
    const std::vector<double> s{0.1, 0.9, 0.5};
    EXPECT_EQ(ranking_from_scores(s).order, (std::vector<std::size_t>{1, 2, 0}));
    const std::vector<double> flat(6, 0.4);
    EXPECT_EQ(ranking_from_scores(flat).order, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
    const std::vector<double> ties{0.2, 0.7, 0.2, 0.7};
    EXPECT_EQ(ranking_from_scores(ties).order, (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Ranking, MonotoneTransformInvariant) {
    Rng rng(3);
    std::vector<double> s(50), t(50);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = uniform01(rng);
        t[i] = std::exp(3.0 * s[i]) - 7.0;
    }
    EXPECT_EQ(ranking_from_scores(s), ranking_from_scores(t));
    EXPECT_TRUE(ranking_from_scores(s).is_permutation());
}

TEST(Precision, IdentityAndReverse) {
    std::vector<double> gt(100);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = static_cast<double>(i);
    std::vector<double> rev(gt.rbegin(), gt.rend());
    for (std::size_t k : {1u, 15u, 30u, 50u, 100u}) EXPECT_EQ(precision_at_k(gt, gt, k), 1.0);
    EXPECT_EQ(precision_at_k(rev, gt, 15), 0.0);
    EXPECT_EQ(precision_at_k(rev, gt, 100), 1.0);
}

TEST(Precision, MatchesSetOracleAndIsSymmetric) {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t m = 2 + rng() % 60;
        const auto a = random_ranking(m, rng), b = random_ranking(m, rng);
        const std::size_t k = 1 + rng() % m;
        EXPECT_DOUBLE_EQ(precision_at_k(a, b, k), precision_oracle(a, b, k));
        EXPECT_EQ(precision_at_k(a, b, k), precision_at_k(b, a, k));
        EXPECT_EQ(precision_at_k(a, b, m), 1.0);
    }
}

TEST(Precision, BoundaryTieUsesIndexOrder) {
    const std::vector<double> gt{0.9, 0.5, 0.5, 0.1};
    const std::vector<double> pred{0.9, 0.1, 0.5, 0.0};
    // gt top-2 is {0, 1}; pred top-2 is {0, 2}
    EXPECT_EQ(precision_at_k(pred, gt, 2), 0.5);
}

TEST(Precision, RejectsBadArguments) {
    RankingOf a{{0, 1, 2}}, b{{2, 1, 0}}, c{{0, 1}};
    EXPECT_THROW(precision_at_k(a, b, 0), ArgumentError);
    EXPECT_THROW(precision_at_k(a, b, 4), ArgumentError);
    EXPECT_THROW(precision_at_k(a, c, 1), ArgumentError);
}

TEST(Baseline, RandomPrecisionIsKOverM) {
    const std::vector<std::size_t> ks{15, 30, 50};
    const auto est = random_precision_baseline(100, ks, 20000, 9);
    for (const auto& e : est) {
        const double expect = static_cast<double>(e.k) / 100.0;
        EXPECT_LT(std::abs(e.mean - expect), 3.0 * e.standard_error + 1e-12) << "k=" << e.k;
        EXPECT_GT(e.standard_error, 0.0);
    }
}

TEST(Kendall, IdentityReverseAndOracle) {
    RankingOf id{{0, 1, 2, 3, 4}}, rev{{4, 3, 2, 1, 0}};
    EXPECT_EQ(kendall_tau(id, id), 1.0);
    EXPECT_EQ(kendall_tau(id, rev), -1.0);
    Rng rng(2);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t m = 2 + rng() % 80;
        const auto a = random_ranking(m, rng), b = random_ranking(m, rng);
        EXPECT_NEAR(kendall_tau(a, b), tau_oracle(a, b), 1e-12);
    }
    EXPECT_THROW(kendall_tau(id, RankingOf{{0, 1}}), ArgumentError);
}

TEST(Alpha, IdenticalRatersGiveOne) {
    Rng rng(4);
    const auto r = random_ranking(10, rng);
    const Matrix m = rank_rows(std::vector<RankingOf>(7, r));
    EXPECT_DOUBLE_EQ(krippendorff_alpha(m), 1.0);
}

TEST(Alpha, TwoSwappedRaters) {
    Matrix m(2, 2);
    m << 1, 2, 2, 1;
    for (auto metric : {AlphaMetric::nominal, AlphaMetric::ordinal, AlphaMetric::interval}) {
        EXPECT_NEAR(krippendorff_alpha(m, metric), -0.5, 1e-12);
        EXPECT_NEAR(krippendorff_alpha(m, metric), alpha_oracle(m, metric), 1e-12);
    }
}

TEST(Alpha, TextbookReliabilityData) {
    // Four coders, twelve units, with gaps.
    Matrix m(4, 12);
    m << 1, 2, 3, 3, 2, 1, 4, 1, 2, kNaN, kNaN, kNaN,  //
        1, 2, 3, 3, 2, 2, 4, 1, 2, 5, kNaN, 3,         //
        kNaN, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, kNaN,      //
        1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, kNaN;
    EXPECT_NEAR(krippendorff_alpha(m, AlphaMetric::nominal), 0.743, 5e-4);
    EXPECT_NEAR(krippendorff_alpha(m, AlphaMetric::ordinal), 0.815, 5e-4);
    EXPECT_NEAR(krippendorff_alpha(m, AlphaMetric::interval), 0.849, 5e-4);
}

TEST(Alpha, MatchesPairwiseOracleWithMissing) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const auto raters = static_cast<Eigen::Index>(2 + rng() % 6);
        const auto items = static_cast<Eigen::Index>(2 + rng() % 10);
        Matrix m(raters, items);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = uniform01(rng) < 0.2 ? kNaN : static_cast<double>(1 + rng() % 5);
        }
        for (auto metric : {AlphaMetric::nominal, AlphaMetric::ordinal, AlphaMetric::interval}) {
            double got = 0.0;
            try {
                got = krippendorff_alpha(m, metric);
            } catch (const UndefinedAlpha&) {
                continue;
            }
            EXPECT_NEAR(got, alpha_oracle(m, metric), 1e-10);
        }
    }
}

TEST(Alpha, RandomRatersNearZero) {
    Rng rng(21);
    double sum = 0.0;
    for (int video = 0; video < 200; ++video) {
        std::vector<RankingOf> rs;
        for (int u = 0; u < 10; ++u) rs.push_back(random_ranking(10, rng));
        sum += krippendorff_alpha(rank_rows(rs));
    }
    EXPECT_LT(std::abs(sum / 200.0), 0.05);
}

TEST(Alpha, UndefinedCasesThrow) {
    Matrix lonely(2, 3);
    lonely << 1, kNaN, 2, kNaN, 3, kNaN;
    EXPECT_THROW(krippendorff_alpha(lonely), UndefinedAlpha);
    Matrix flat = Matrix::Constant(3, 4, 2.0);
    EXPECT_THROW(krippendorff_alpha(flat), UndefinedAlpha);
    EXPECT_THROW(krippendorff_alpha(Matrix::Ones(1, 4)), ArgumentError);
    EXPECT_THROW(parse_alpha_metric("ratio"), ArgumentError);
}

TEST(Summary, SampleDeviation) {
    const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
    const auto s = summarize(xs);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_NEAR(s.sd, std::sqrt(5.0 / 3.0), 1e-15);
    EXPECT_EQ(summarize(std::vector<double>{7.0}).sd, 0.0);
}

}  // namespace
}  // namespace mrp
