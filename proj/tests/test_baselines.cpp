#include <gtest/gtest.h>

#include "acemerge/baselines.hpp"
#include "acemerge/theory.hpp"
#include "test_util.hpp"

using namespace acemerge;

namespace {

std::vector<Matrix> experts_around(theory::Rng& rng, const Matrix& base, std::size_t tasks, double scale = 1.0) {
    std::vector<Matrix> e;
    for (std::size_t t = 0; t < tasks; ++t) e.push_back(base + theory::gaussian_matrix(rng, base.rows(), base.cols(), scale));
    return e;
}

} // namespace

TEST(WeightAverage, Examples) {
    theory::Rng rng(1);
    const Matrix m = theory::gaussian_matrix(rng, 3, 4);
    EXPECT_EQ(weight_average(std::vector<Matrix>{m}), m);
    EXPECT_EQ(weight_average(std::vector<Matrix>{m, Matrix(-m)}), Matrix::Zero(3, 4));
    EXPECT_THROW(weight_average(std::vector<Matrix>{}), Error);
    EXPECT_THROW(weight_average(std::vector<Matrix>{m, Matrix::Zero(4, 3)}), Error);
}

TEST(TaskArithmetic, Examples) {
    theory::Rng rng(2);
    const Matrix base = theory::gaussian_matrix(rng, 3, 3);
    const auto experts = experts_around(rng, base, 3);
    EXPECT_EQ(task_arithmetic(base, experts, 0.0), base);
    EXPECT_LT((task_arithmetic(base, std::vector<Matrix>{experts[0]}, 1.0) - experts[0]).norm(), 1e-14);
    const std::vector<Matrix> same(4, experts[1]);
    EXPECT_LT((task_arithmetic(base, same, 0.25) - experts[1]).norm(), 1e-14);
}

TEST(CovProxy, IsotropicEqualsAverage) {
    theory::Rng rng(3);
    const Matrix base = theory::gaussian_matrix(rng, 5, 6);
    const auto experts = experts_around(rng, base, 4);
    const Matrix avg = weight_average(experts);
    for (double k : {1e-3, 1.0, 1e3})
        EXPECT_LT(test::rel_err(cov_proxy_merge(base, experts, proxy::Isotropic{k}, 1e-5).w, avg), 1e-12) << k;
    EXPECT_THROW(cov_proxy_merge(base, experts, proxy::Isotropic{0.0}, 1e-5), Error);
}

TEST(CovProxy, TvOuterSingleTaskRecoversExpert) {
    theory::Rng rng(4);
    const Matrix base = theory::gaussian_matrix(rng, 6, 4);
    const auto experts = experts_around(rng, base, 1);
    // A single task gives W_1 S (S)^{-1}: the eps sweep stays at W_1 up to rounding.
    for (double eps : {1e-1, 1e-3, 1e-5, 1e-7})
        EXPECT_LT(test::rel_err(cov_proxy_merge(base, experts, proxy::TvOuter{}, eps).w, experts[0]), 1e-12) << eps;
}

TEST(CovProxy, NormVariantAgreesForEqualNorms) {
    theory::Rng rng(5);
    const Matrix base = theory::gaussian_matrix(rng, 5, 4);
    auto experts = experts_around(rng, base, 3);
    for (auto& e : experts) {
        const Matrix d = e - base;
        e = base + d * (2.0 / d.norm());  // every ||dW||_F = 2
    }
    // With equal norms c, the normalized proxy is the plain one divided by c^2, so
    // eps must be divided by c^2 for the two systems to coincide.
    const auto plain = cov_proxy_merge(base, experts, proxy::TvOuter{}, 4e-6).w;
    const auto norm = cov_proxy_merge(base, experts, proxy::TvOuterNorm{}, 1e-6).w;
    EXPECT_LT(test::rel_err(norm, plain), 1e-9);
}

TEST(CovProxy, NormProxyIsScaleFree) {
    theory::Rng rng(6);
    const Matrix d = theory::gaussian_matrix(rng, 5, 4);
    for (double c : {1e-3, 0.5, 7.0, 1e4})
        EXPECT_LT(test::rel_err(proxy_covariance(c * d, proxy::TvOuterNorm{}), proxy_covariance(d, proxy::TvOuterNorm{})),
                  1e-12);
    EXPECT_THROW(proxy_covariance(Matrix::Zero(2, 2), proxy::TvOuterNorm{}), Error);
}

TEST(CovProxy, TvOuterIsUncentered) {
    Matrix d(2, 2);
    d << 1, 0, 1, 0;  // constant rows: centered Gram is zero, uncentered is not
    Matrix expected = Matrix::Zero(2, 2);
    expected(0, 0) = 2;
    EXPECT_EQ(proxy_covariance(d, proxy::TvOuter{}), expected);
}

TEST(CovProxy, ValidatesInputs) {
    theory::Rng rng(7);
    const Matrix base = theory::gaussian_matrix(rng, 3, 3);
    const auto experts = experts_around(rng, base, 2);
    EXPECT_THROW(cov_proxy_merge(base, experts, proxy::TvOuter{}, 0.0), Error);
    EXPECT_THROW(cov_proxy_merge(base, std::vector<Matrix>{}, proxy::TvOuter{}, 1.0), Error);
    EXPECT_THROW(cov_proxy_merge(base, std::vector<Matrix>{Matrix::Zero(3, 2)}, proxy::TvOuter{}, 1.0), Error);
}

TEST(Baselines, Deterministic) {
    theory::Rng rng(8);
    const Matrix base = theory::gaussian_matrix(rng, 4, 4);
    const auto experts = experts_around(rng, base, 3);
    EXPECT_EQ(cov_proxy_merge(base, experts, proxy::TvOuterNorm{}, 1e-5).w,
              cov_proxy_merge(base, experts, proxy::TvOuterNorm{}, 1e-5).w);
}
