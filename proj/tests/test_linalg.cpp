#include <gtest/gtest.h>

#include <cmath>

#include "acemerge/linalg.hpp"
#include "acemerge/theory.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace acemerge;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

} // namespace

TEST(SolveRight, DiagonalExample) {
    const Matrix x = solve_right(mat({{2, 4}}), mat({{2, 0}, {0, 4}}));
    EXPECT_NEAR(x(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(x(0, 1), 1.0, 1e-14);
}

TEST(SolveRight, IdentityIsNoop) {
    theory::Rng rng(1);
    const Matrix b = theory::gaussian_matrix(rng, 3, 5);
    EXPECT_LT((solve_right(b, Matrix::Identity(5, 5)) - b).norm(), 1e-14);
}

TEST(SolveRight, MatchesGaussJordanOracle) {
    theory::Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index n = 2 + trial % 9;
        const Matrix a = theory::random_spd(rng, n, 1e-2, 1e2);
        const Matrix b = theory::gaussian_matrix(rng, 4, n);
        const Matrix expected = oracle::to(oracle::multiply(oracle::from(b), oracle::inverse(oracle::from(a))));
        EXPECT_LT(test::rel_err(solve_right(b, a), expected), 1e-9) << "n=" << n;
    }
}

TEST(SolveRight, ResidualIsSmall) {
    theory::Rng rng(3);
    const Matrix a = theory::random_spd(rng, 16, 1e-2, 1e2);
    const Matrix b = theory::gaussian_matrix(rng, 7, 16);
    const Matrix x = solve_right(b, a);
    EXPECT_LT((x * a - b).norm() / b.norm(), 1e-12);
}

TEST(SolveRight, NonPositiveDefiniteReportsPivot) {
    try {
        solve_right(mat({{1, 1, 1}}), mat({{1, 0, 0}, {0, -1, 0}, {0, 0, 1}}));
        FAIL();
    } catch (const FactorizationError& e) {
        EXPECT_EQ(e.pivot(), 1u);
        EXPECT_EQ(e.kind(), ErrorKind::numerical);
    }
    try {
        // Second leading minor vanishes: [[1,1],[1,1]]
        solve_right(mat({{1, 1}}), mat({{1, 1}, {1, 1}}));
        FAIL();
    } catch (const FactorizationError& e) {
        EXPECT_EQ(e.pivot(), 1u);
    }
}

TEST(SolveRight, RejectsAsymmetryAndShapes) {
    try {
        solve_right(mat({{1, 1}}), mat({{2, 1}, {0, 2}}));
        FAIL();
    } catch (const FactorizationError&) {
        FAIL() << "asymmetry must be rejected before factorization";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numerical);
    }
    try {
        solve_right(mat({{1, 1, 1}}), Matrix::Identity(2, 2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::validation);
    }
    Matrix bad = Matrix::Identity(2, 2);
    bad(0, 0) = std::nan("");
    EXPECT_THROW(solve_right(mat({{1, 1}}), bad), Error);
}

TEST(Svd, DiagonalExample) {
    const auto r = svd_thin(mat({{3, 0}, {0, 1}}));
    EXPECT_NEAR(r.S(0), 3.0, 1e-14);
    EXPECT_NEAR(r.S(1), 1.0, 1e-14);
    EXPECT_NEAR(std::abs(r.U(0, 0)), 1.0, 1e-14);
    EXPECT_NEAR(std::abs(r.V(0, 0)), 1.0, 1e-14);
}

TEST(Svd, ZeroMatrix) {
    const auto r = svd_thin(Matrix::Zero(3, 4));
    ASSERT_EQ(r.S.size(), 3);
    EXPECT_EQ(r.S.norm(), 0.0);
    EXPECT_EQ(r.U.rows(), 3);
    EXPECT_EQ(r.V.rows(), 4);
}

TEST(Svd, ReconstructionOrthonormalityAndOracle) {
    theory::Rng rng(4);
    for (auto [m, n] : {std::pair{5, 3}, {3, 5}, {8, 8}, {1, 6}}) {
        const Matrix a = theory::gaussian_matrix(rng, m, n);
        const auto r = svd_thin(a);
        const Eigen::Index k = std::min(m, n);
        ASSERT_EQ(r.U.cols(), k);
        ASSERT_EQ(r.V.cols(), k);
        const Matrix rebuilt = r.U * r.S.asDiagonal() * r.V.transpose();
        EXPECT_LT((rebuilt - a).norm() / a.norm(), 1e-12);
        EXPECT_LT((r.U.transpose() * r.U - Matrix::Identity(k, k)).norm(), 1e-12);
        EXPECT_LT((r.V.transpose() * r.V - Matrix::Identity(k, k)).norm(), 1e-12);
        for (Eigen::Index i = 1; i < k; ++i) EXPECT_GE(r.S(i - 1), r.S(i));
        const auto ref = oracle::singular_values(oracle::from(a));
        for (Eigen::Index i = 0; i < k; ++i) EXPECT_NEAR(r.S(i), ref[static_cast<std::size_t>(i)], 1e-9 * r.S(0));
    }
}

TEST(Svd, OrthogonalInvariance) {
    theory::Rng rng(5);
    const Matrix a = theory::gaussian_matrix(rng, 6, 4);
    const Matrix p = theory::random_orthogonal(rng, 6);
    const Matrix q = theory::random_orthogonal(rng, 4);
    const auto s1 = svd_thin(a).S;
    const auto s2 = svd_thin(p * a * q).S;
    EXPECT_LT((s1 - s2).norm(), 1e-12 * s1(0));
}

TEST(Spectrum, Examples) {
    const std::vector<double> s1{10, 1};
    EXPECT_DOUBLE_EQ(spectrum_stats(s1).condition_number(), 10.0);
    EXPECT_EQ(spectrum_stats(s1).num_effective(), 2u);

    const std::vector<double> s2{1, 1, 1, 1};
    EXPECT_DOUBLE_EQ(spectrum_stats(s2).energy_fraction(0.25), 0.25);

    const std::vector<double> s3{100, 1, 1, 1};
    EXPECT_DOUBLE_EQ(spectrum_stats(s3).energy_fraction(0.25), 10000.0 / 10003.0);
}

TEST(Spectrum, EdgeCases) {
    const std::vector<double> zeros{0, 0, 0};
    const auto z = spectrum_stats(zeros);
    EXPECT_TRUE(std::isnan(z.condition_number()));
    EXPECT_EQ(z.num_effective(), 0u);
    EXPECT_EQ(z.energy_fraction(0.05), 1.0);

    const std::vector<double> with_zero{4, 2, 0};
    EXPECT_DOUBLE_EQ(spectrum_stats(with_zero).condition_number(), 2.0);
    EXPECT_EQ(spectrum_stats(with_zero).num_effective(), 2u);

    const std::vector<double> unsorted{1, 3, 2};
    EXPECT_EQ(spectrum_stats(unsorted).singular_values(), (std::vector<double>{3, 2, 1}));

    const std::vector<double> negative{1, -1};
    EXPECT_THROW(spectrum_stats(negative), Error);
    EXPECT_THROW(spectrum_stats(std::vector<double>{}), Error);
}

TEST(Spectrum, EnergyFractionIsMonotoneInP) {
    theory::Rng rng(6);
    const auto s = svd_thin(theory::gaussian_matrix(rng, 20, 30)).S;
    const auto st = spectrum_stats(s);
    double prev = 0.0;
    for (double p = 0.0; p <= 1.0; p += 0.01) {
        const double e = st.energy_fraction(p);
        EXPECT_GE(e, prev - 1e-15);
        prev = e;
    }
    EXPECT_NEAR(st.energy_fraction(1.0), 1.0, 1e-14);
}

TEST(TraceFrobenius, Examples) {
    EXPECT_EQ(trace(mat({{1, 2}, {3, 4}})), 5.0);
    EXPECT_EQ(frobenius_sq(mat({{1, 2}, {3, 4}})), 30.0);
    EXPECT_THROW(trace(mat({{1, 2, 3}})), Error);
}

TEST(TraceFrobenius, GramIdentityAndScaling) {
    theory::Rng rng(7);
    const Matrix d = theory::gaussian_matrix(rng, 9, 4);
    EXPECT_NEAR(trace(d.transpose() * d), frobenius_sq(d), 1e-12 * frobenius_sq(d));
    EXPECT_NEAR(frobenius_sq(2.5 * d), 6.25 * frobenius_sq(d), 1e-12 * frobenius_sq(d));
    const Matrix a = theory::random_spd(rng, 5, 0.1, 10);
    EXPECT_NEAR(trace(3.0 * a), 3.0 * trace(a), 1e-12 * trace(a));
}

TEST(Asymmetry, Values) {
    EXPECT_EQ(relative_asymmetry(Matrix::Zero(3, 3)), 0.0);
    EXPECT_EQ(relative_asymmetry(Matrix::Identity(3, 3)), 0.0);
    EXPECT_GT(relative_asymmetry(mat({{0, 1}, {0, 0}})), 1.0);
}
