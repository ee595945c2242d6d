#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <numbers>

#include "oucovit/numcore.hpp"
#include "oucovit/oracle.hpp"
#include "oucovit/random.hpp"
#include "test_support.hpp"

using namespace oucovit;
using namespace oucovit::numcore;
using oucovit::testing::rel_err;

namespace {

using mp = boost::multiprecision::cpp_bin_float_50;

// exp(x) by its Taylor series in 50-digit arithmetic.
mp mp_exp(mp x) {
    mp term = 1;
    mp sum = 1;
    for (int n = 1; n < 400; ++n) {
        term *= x / n;
        sum += term;
        if (abs(term) < mp("1e-60")) break;
    }
    return sum;
}

mp mp_pdf(mp x) {
    return mp_exp(-x * x / 2) / sqrt(2 * boost::math::constants::pi<mp>());
}

// Phi(x) = 1/2 + phi(x) * sum_n x^{2n+1} / (1*3*...*(2n+1)).
mp mp_cdf(mp x) {
    mp term = x;
    mp sum = x;
    for (int n = 1; n < 2000; ++n) {
        term *= x * x / (2 * n + 1);
        sum += term;
        if (abs(term) < mp("1e-60")) break;
    }
    return mp(0.5) + mp_pdf(x) * sum;
}

}  // namespace

TEST(StdNormalPdf, KnownValues) {
    EXPECT_DOUBLE_EQ(std_normal_pdf(0.0), 0.3989422804014327);
    for (double x : {0.1, 0.7, 1.5, 3.0, 6.0}) EXPECT_EQ(std_normal_pdf(x), std_normal_pdf(-x));
    EXPECT_NEAR(std_normal_pdf(1.0), mp_pdf(1).convert_to<double>(), 1e-14);
    EXPECT_GT(std_normal_pdf(8.0), 0.0);
}

TEST(StdNormalCdf, LimitsAndSymmetry) {
    EXPECT_EQ(std_normal_cdf(0.0), 0.5);
    EXPECT_EQ(std_normal_cdf(kInf), 1.0);
    EXPECT_EQ(std_normal_cdf(-kInf), 0.0);
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const double x = rng.uniform(-10.0, 10.0);
        EXPECT_NEAR(std_normal_cdf(x) + std_normal_cdf(-x), 1.0, 1e-12);
    }
}

TEST(StdNormalCdf, MatchesArbitraryPrecisionSeries) {
    EXPECT_NEAR(std_normal_cdf(1.0), mp_cdf(1).convert_to<double>(), 1e-12);
    for (double x : {-5.0, -2.5, -0.3, 0.4, 1.96, 3.7}) {
        EXPECT_NEAR(std_normal_cdf(x), mp_cdf(mp(x)).convert_to<double>(), 1e-12) << x;
    }
}

TEST(StdNormalCdf, Monotone) {
    double prev = 0.0;
    for (double x = -9.0; x <= 9.0; x += 0.01) {
        const double v = std_normal_cdf(x);
        EXPECT_GE(v, prev);
        prev = v;
    }
}

TEST(StdNormalInvCdf, MedianSymmetryRoundTrip) {
    EXPECT_EQ(std_normal_inv_cdf(0.5), 0.0);
    for (double p : {1.0 / 1024, 0.001, 0.02, 0.125, 0.3, 0.45}) {
        EXPECT_NEAR(std_normal_inv_cdf(p), -std_normal_inv_cdf(1.0 - p), 1e-9);
    }
    const double x = std_normal_inv_cdf(0.975);
    EXPECT_NEAR(std_normal_cdf(x), 0.975, 1e-9);
    EXPECT_NEAR(x, 1.959963984540054, 1e-12);
}

TEST(StdNormalInvCdf, DomainErrors) {
    EXPECT_THROW(std_normal_inv_cdf(0.0), DomainError);
    EXPECT_THROW(std_normal_inv_cdf(1.0), DomainError);
    EXPECT_THROW(std_normal_inv_cdf(-0.1), DomainError);
    EXPECT_THROW(std_normal_inv_cdf(std::nan("")), DomainError);
    EXPECT_NEAR(std_normal_inv_cdf(0.0, true), std_normal_inv_cdf(kProbClamp), 0.0);
    EXPECT_TRUE(std::isfinite(std_normal_inv_cdf(1.0, true)));
}

TEST(StdNormalInvCdf, RoundTripProperty) {
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const double x = rng.uniform(-6.0, 6.0);
        EXPECT_NEAR(std_normal_inv_cdf(std_normal_cdf(x)), x, 1e-7) << x;
        const double p = rng.uniform_open();
        EXPECT_NEAR(std_normal_cdf(std_normal_inv_cdf(p)), p, 1e-9);
    }
}

TEST(BvnCdf, AnalyticIdentities) {
    EXPECT_NEAR(bvn_cdf(0, 0, 0), 0.25, 1e-15);
    EXPECT_NEAR(bvn_cdf(0, 0, 0.5), 1.0 / 3.0, 1e-12);
    for (int i = -9; i <= 9; ++i) {
        const double rho = 0.1 * i;
        EXPECT_NEAR(bvn_cdf(0, 0, rho), 0.25 + std::asin(rho) / (2 * std::numbers::pi), 1e-9) << rho;
    }
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const double h = rng.uniform(-4, 4);
        const double k = rng.uniform(-4, 4);
        EXPECT_NEAR(bvn_cdf(h, k, 0.0), std_normal_cdf(h) * std_normal_cdf(k), 1e-15);
    }
}

TEST(BvnCdf, InfiniteLimits) {
    for (double h : {-3.0, -0.2, 0.0, 1.1, 4.0}) {
        for (double rho : {-0.95, -0.3, 0.0, 0.5, 0.99}) {
            EXPECT_NEAR(bvn_cdf(h, kInf, rho), std_normal_cdf(h), 1e-9);
            EXPECT_NEAR(bvn_cdf(kInf, h, rho), std_normal_cdf(h), 1e-9);
            EXPECT_EQ(bvn_cdf(h, -kInf, rho), 0.0);
        }
    }
    EXPECT_EQ(bvn_cdf(kInf, kInf, 0.3), 1.0);
}

TEST(BvnCdf, MatchesQuadratureOracle) {
    EXPECT_NEAR(bvn_cdf(0.3, -0.7, 0.6), oracle::bvn_cdf_numeric(0.3, -0.7, 0.6), 1e-7);
    Rng rng(17);
    for (int i = 0; i < 60; ++i) {
        const double h = rng.uniform(-3.5, 3.5);
        const double k = rng.uniform(-3.5, 3.5);
        const double rho = rng.uniform(-0.99, 0.99);
        EXPECT_NEAR(bvn_cdf(h, k, rho), oracle::bvn_cdf_numeric(h, k, rho), 1e-7) << h << " " << k << " " << rho;
    }
}

TEST(BvnCdf, SymmetryAndRectangles) {
    Rng rng(23);
    for (int i = 0; i < 500; ++i) {
        const double h = rng.uniform(-4, 4);
        const double k = rng.uniform(-4, 4);
        const double rho = rng.uniform(-0.999, 0.999);
        EXPECT_EQ(bvn_cdf(h, k, rho).value, bvn_cdf(k, h, rho).value);
        const double h2 = h - rng.uniform(0, 2);
        const double k2 = k - rng.uniform(0, 2);
        const double rect = bvn_cdf(h, k, rho) - bvn_cdf(h2, k, rho) - bvn_cdf(h, k2, rho) + bvn_cdf(h2, k2, rho);
        EXPECT_GE(rect, -1e-12);
        // Monotone up to the algorithm's absolute accuracy.
        EXPECT_GE(bvn_cdf(h, k, rho) + 1e-15, bvn_cdf(h2, k, rho));
        EXPECT_GE(bvn_cdf(h, k, rho) + 1e-15, bvn_cdf(h, k2, rho));
    }
}

TEST(BvnCdf, RhoIsClamped) {
    const double v = bvn_cdf(0.2, 0.2, 1.0);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, std_normal_cdf(0.2), 1e-3);
}

TEST(BvnCdfDh, DegenerateAndIndependentCases) {
    for (double rho : {-0.8, 0.0, 0.4}) EXPECT_EQ(bvn_cdf_dh({0.0, kInf, rho}), std_normal_pdf(0.0));
    EXPECT_NEAR(bvn_cdf_dh({0.0, kInf, 0.2}), 0.3989422804014327, 1e-16);
    EXPECT_NEAR(bvn_cdf_dh({0.7, -0.4, 0.0}), std_normal_pdf(0.7) * std_normal_cdf(-0.4), 1e-16);
    EXPECT_EQ(bvn_cdf_dk({-0.4, 0.7, 0.3}), bvn_cdf_dh({0.7, -0.4, 0.3}));
}

TEST(BvnCdfDh, MatchesFiniteDifferences) {
    constexpr double step = 1e-5;
    auto fd_h = [&](double h, double k, double rho) {
        return (bvn_cdf(h + step, k, rho) - bvn_cdf(h - step, k, rho)) / (2 * step);
    };
    auto fd_k = [&](double h, double k, double rho) {
        return (bvn_cdf(h, k + step, rho) - bvn_cdf(h, k - step, rho)) / (2 * step);
    };
    EXPECT_LT(rel_err(bvn_cdf_dh({0.3, -0.7, 0.6}), fd_h(0.3, -0.7, 0.6)), 1e-5);

    Rng rng(29);
    for (int i = 0; i < 200; ++i) {
        const double h = rng.uniform(-3, 3);
        const double k = rng.uniform(-3, 3);
        const double rho = rng.uniform(-0.95, 0.95);
        const double a = bvn_cdf_dh({h, k, rho});
        const double f = fd_h(h, k, rho);
        // Below ~1e-11 the central difference is rounding noise.
        EXPECT_TRUE(rel_err(a, f) <= 1e-5 || std::abs(a - f) <= 1e-11) << h << " " << k << " " << rho;
        const double ak = bvn_cdf_dk({h, k, rho});
        const double fk = fd_k(h, k, rho);
        EXPECT_TRUE(rel_err(ak, fk) <= 1e-5 || std::abs(ak - fk) <= 1e-11);
    }
}
