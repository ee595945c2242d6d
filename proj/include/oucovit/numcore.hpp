#pragma once

// Scalar normal-distribution primitives: univariate CDF/PDF/quantile and the
// bivariate normal CDF with its partial derivatives.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>

#include "oucovit/errors.hpp"

namespace oucovit::numcore {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Correlations are kept at least this far from +-1.
inline constexpr double kRhoClamp = 1e-7;
/// Probabilities fed to the quantile are clamped into [kProbClamp, 1 - kProbClamp].
inline constexpr double kProbClamp = 1e-12;

inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934;

/// Probability value in [0, 1].
struct Prob {
    double value = 0.0;

    constexpr operator double() const noexcept { return value; }
};

/// Upper integration limits and correlation of a standard bivariate normal.
/// Either limit may be +-infinity.
struct BvnArgs {
    double h = 0.0;
    double k = 0.0;
    double rho = 0.0;
};

inline double clamp_rho(double rho) noexcept {
    return std::clamp(rho, -1.0 + kRhoClamp, 1.0 - kRhoClamp);
}

inline double clamp_prob(double p) noexcept {
    return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
}

inline double std_normal_pdf(double x) noexcept {
    return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

/// Phi(x) = erfc(-x / sqrt(2)) / 2. erfc keeps full relative accuracy in the
/// lower tail, which matters because callers take logs of small probabilities.
inline double std_normal_cdf(double x) noexcept {
    if (x == kInf) return 1.0;
    if (x == -kInf) return 0.0;
    return 0.5 * std::erfc(-x * std::numbers::sqrt2 * 0.5);
}

/// Upper tail 1 - Phi(x) without cancellation.
inline double std_normal_sf(double x) noexcept { return std_normal_cdf(-x); }

namespace detail {

// Acklam's rational approximation (relative error < 1.15e-9) followed by one
// Halley step against the erfc-based CDF, which brings it to machine precision.
inline double acklam_quantile(double p) noexcept {
    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    // Work on the lower half so the result is exactly odd about p = 0.5.
    const double q = std::min(p, 1.0 - p);
    double x;
    if (q > p_low) {
        const double u = q - 0.5;
        const double t = u * u;
        x = u * (((((a[0] * t + a[1]) * t + a[2]) * t + a[3]) * t + a[4]) * t + a[5]) /
            (((((b[0] * t + b[1]) * t + b[2]) * t + b[3]) * t + b[4]) * t + 1.0);
    } else {
        const double t = std::sqrt(-2.0 * std::log(q));
        x = (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
            ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0);
    }
    const double e = std_normal_cdf(x) - q;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x = x - u / (1.0 + 0.5 * x * u);
    return p > 0.5 ? -x : x;
}

}  // namespace detail

/// Phi^{-1}(p). With `clamp` set, p is first clamped into
/// [kProbClamp, 1 - kProbClamp]; otherwise p must lie strictly inside (0, 1).
inline double std_normal_inv_cdf(double p, bool clamp = false) {
    if (std::isnan(p)) throw DomainError("std_normal_inv_cdf: p is NaN");
    if (clamp) {
        p = clamp_prob(p);
    } else if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("std_normal_inv_cdf: p outside (0, 1)");
    }
    if (p == 0.5) return 0.0;
    return detail::acklam_quantile(p);
}

namespace detail {

// Half-node Gauss-Legendre tables (6, 12 and 20 points) used by Genz's BVNU.
inline constexpr std::array<std::array<double, 10>, 3> kGlNodes = {{
    {-0.9324695142031522, -0.6612093864662647, -0.2386191860831970},
    {-0.9815606342467191, -0.9041172563704750, -0.7699026741943050,
     -0.5873179542866171, -0.3678314989981802, -0.1252334085114692},
    {-0.9931285991850949, -0.9639719272779138, -0.9122344282513259,
     -0.8391169718222188, -0.7463319064601508, -0.6360536807265150,
     -0.5108670019508271, -0.3737060887154196, -0.2277858511416451,
     -0.07652652113349733},
}};
inline constexpr std::array<std::array<double, 10>, 3> kGlWeights = {{
    {0.1713244923791705, 0.3607615730481384, 0.4679139345726904},
    {0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
     0.2031674267230659, 0.2334925365383547, 0.2491470458134029},
    {0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
     0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
     0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
     0.1527533871307259},
}};

/// P(X > h, Y > k) for a standard bivariate normal with correlation r, finite
/// h and k. Drezner-Wesolowsky as refined by Genz (2004), absolute error about
/// 1e-15.
inline double bvn_upper(double h, double k, double r) noexcept {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const double ar = std::abs(r);
    int ng;
    int lg;
    if (ar < 0.3) {
        ng = 0;
        lg = 3;
    } else if (ar < 0.75) {
        ng = 1;
        lg = 6;
    } else {
        ng = 2;
        lg = 10;
    }
    const auto& x = kGlNodes[ng];
    const auto& w = kGlWeights[ng];

    double hk = h * k;
    double bvn = 0.0;
    if (ar < 0.925) {
        const double hs = 0.5 * (h * h + k * k);
        const double asr = std::asin(r);
        for (int i = 0; i < lg; ++i) {
            double sn = std::sin(asr * (x[i] + 1.0) * 0.5);
            bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
            sn = std::sin(asr * (1.0 - x[i]) * 0.5);
            bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
        }
        return bvn * asr / (2.0 * two_pi) + std_normal_sf(h) * std_normal_sf(k);
    }

    if (r < 0.0) {
        k = -k;
        hk = -hk;
    }
    if (ar < 1.0) {
        const double as = (1.0 - r) * (1.0 + r);
        double a = std::sqrt(as);
        const double bs = (h - k) * (h - k);
        const double c = (4.0 - hk) / 8.0;
        const double d = (12.0 - hk) / 16.0;
        bvn = a * std::exp(-0.5 * (bs / as + hk)) *
              (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
        if (hk > -160.0) {
            const double b = std::sqrt(bs);
            bvn -= std::exp(-0.5 * hk) * std::sqrt(two_pi) * std_normal_cdf(-b / a) * b *
                   (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for (int i = 0; i < lg; ++i) {
            double xs = a * (x[i] + 1.0);
            xs *= xs;
            double rs = std::sqrt(1.0 - xs);
            bvn += a * w[i] *
                   (std::exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs -
                    std::exp(-0.5 * (bs / xs + hk)) * (1.0 + c * xs * (1.0 + d * xs)));
            xs = as * (1.0 - x[i]) * (1.0 - x[i]) / 4.0;
            rs = std::sqrt(1.0 - xs);
            bvn += a * w[i] * std::exp(-0.5 * (bs / xs + hk)) *
                   (std::exp(-hk * xs / (2.0 * (1.0 + rs) * (1.0 + rs))) / rs -
                    (1.0 + c * xs * (1.0 + d * xs)));
        }
        bvn = -bvn / two_pi;
    }
    if (r > 0.0) {
        bvn += std_normal_cdf(-std::max(h, k));
    } else {
        bvn = -bvn;
        if (k > h) {
            if (h < 0.0) {
                bvn += std_normal_cdf(k) - std_normal_cdf(h);
            } else {
                bvn += std_normal_cdf(-h) - std_normal_cdf(-k);
            }
        }
    }
    return bvn;
}

}  // namespace detail

/// Phi_2(h, k; rho) = P(Z1 <= h, Z2 <= k). rho is clamped by kRhoClamp;
/// infinite limits are resolved exactly before any quadrature.
inline Prob bvn_cdf(BvnArgs args) noexcept {
    const double rho = clamp_rho(args.rho);
    auto [h, k] = std::pair{args.h, args.k};
    // Canonical argument order makes the result exactly symmetric in (h, k).
    if (k < h) std::swap(h, k);
    if (h == -kInf || k == -kInf) return {0.0};
    if (h == kInf && k == kInf) return {1.0};
    if (k == kInf) return {std_normal_cdf(h)};
    if (h == kInf) return {std_normal_cdf(k)};
    if (args.rho == 0.0) return {std_normal_cdf(h) * std_normal_cdf(k)};
    const double v = detail::bvn_upper(-h, -k, rho);
    return {std::clamp(v, 0.0, 1.0)};
}

inline Prob bvn_cdf(double h, double k, double rho) noexcept { return bvn_cdf({h, k, rho}); }

/// d Phi_2 / dh = phi(h) * Phi((k - rho h) / sqrt(1 - rho^2)).
inline double bvn_cdf_dh(BvnArgs args) noexcept {
    const double rho = clamp_rho(args.rho);
    const double h = args.h;
    const double k = args.k;
    if (std::isinf(h)) return 0.0;
    if (k == -kInf) return 0.0;
    if (k == kInf) return std_normal_pdf(h);
    if (args.rho == 0.0) return std_normal_pdf(h) * std_normal_cdf(k);
    return std_normal_pdf(h) * std_normal_cdf((k - rho * h) / std::sqrt((1.0 - rho) * (1.0 + rho)));
}

/// d Phi_2 / dk, by symmetry of the bivariate normal.
inline double bvn_cdf_dk(BvnArgs args) noexcept { return bvn_cdf_dh({args.k, args.h, args.rho}); }

}  // namespace oucovit::numcore
