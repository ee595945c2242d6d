#pragma once

// Slow reference implementations used by the test suites and the
// `oracle-check` command. Nothing here is on the training path.
//
// The joint density is evaluated straight from the mixed-margin copula
// formula: continuous marginal densities times an alternating sum of
// second-order copula derivatives, each derivative being a 2-D integral over
// the binary latents. Normal-distribution functions come from Boost.Math and
// the linear algebra uses the full 4x4 precision matrix, so this path shares
// no numerics with the closed-form code it checks.

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "oucovit/copula.hpp"
#include "oucovit/errors.hpp"
#include "oucovit/random.hpp"

namespace oucovit::oracle {

enum class QuadratureRule { tensor_gauss_legendre, adaptive };

struct QuadratureSpec {
    QuadratureRule rule = QuadratureRule::tensor_gauss_legendre;
    int nodes_per_axis = 128;
    double domain_halfwidth = 8.0;  // in latent standard deviations
    double tolerance = 1e-12;       // adaptive rule only
    unsigned max_depth = 20;        // adaptive rule only

    void validate() const {
        if (nodes_per_axis < 32) throw DomainError("QuadratureSpec: nodes_per_axis must be >= 32");
        if (domain_halfwidth < 8.0) throw DomainError("QuadratureSpec: domain_halfwidth must be >= 8");
    }
};

namespace detail {

inline const boost::math::normal_distribution<double>& unit_normal() {
    static const boost::math::normal_distribution<double> d(0.0, 1.0);
    return d;
}

inline double phi(double x) { return boost::math::pdf(unit_normal(), x); }
inline double cdf(double x) { return boost::math::cdf(unit_normal(), x); }

/// Phi^{-1} with exact handling of 0 and 1.
inline double quantile(double u) {
    if (u <= 0.0) return -std::numeric_limits<double>::infinity();
    if (u >= 1.0) return std::numeric_limits<double>::infinity();
    return boost::math::quantile(unit_normal(), u);
}

}  // namespace detail

/// n-point Gauss-Legendre nodes and weights on [-1, 1] (Newton on P_n).
struct GaussLegendre {
    std::vector<double> nodes;
    std::vector<double> weights;

    explicit GaussLegendre(int n) : nodes(n), weights(n) {
        for (int i = 0; i < (n + 1) / 2; ++i) {
            double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
            double dp = 0.0;
            for (int iter = 0; iter < 100; ++iter) {
                double p0 = 1.0;
                double p1 = x;
                for (int k = 2; k <= n; ++k) {
                    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (x * p1 - p0) / (x * x - 1.0);
                const double dx = p1 / dp;
                x -= dx;
                if (std::abs(dx) < 1e-16) break;
            }
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
    }
};

/// Composite Gauss-Legendre over [a, b] using panels of 16 nodes.
class CompositeRule {
public:
    explicit CompositeRule(int total_nodes) : panels_(std::max(1, total_nodes / 16)), base_(16) {}

    template <typename F>
    double integrate(F&& f, double a, double b) const {
        if (!(b > a)) return 0.0;
        const double width = (b - a) / panels_;
        double total = 0.0;
        for (int p = 0; p < panels_; ++p) {
            const double lo = a + p * width;
            const double half = 0.5 * width;
            const double mid = lo + half;
            double s = 0.0;
            for (std::size_t i = 0; i < base_.nodes.size(); ++i) s += base_.weights[i] * f(mid + half * base_.nodes[i]);
            total += half * s;
        }
        return total;
    }

private:
    int panels_;
    GaussLegendre base_;
};

namespace detail {

template <typename F>
double integrate_2d(F&& f, double a0, double b0, double a1, double b1, const QuadratureSpec& spec) {
    if (!(b0 > a0) || !(b1 > a1)) return 0.0;
    if (spec.rule == QuadratureRule::tensor_gauss_legendre) {
        const CompositeRule rule(spec.nodes_per_axis);
        return rule.integrate([&](double x) { return rule.integrate([&](double y) { return f(x, y); }, a1, b1); },
                              a0, b0);
    }
    using boost::math::quadrature::gauss_kronrod;
    double outer_err = 0.0;
    double worst_inner = 0.0;
    const double value = gauss_kronrod<double, 31>::integrate(
        [&](double x) {
            double inner_err = 0.0;
            const double v = gauss_kronrod<double, 31>::integrate([&](double y) { return f(x, y); }, a1, b1,
                                                                  spec.max_depth, spec.tolerance, &inner_err);
            worst_inner = std::max(worst_inner, inner_err);
            return v;
        },
        a0, b0, spec.max_depth, spec.tolerance, &outer_err);
    const double scale = std::max(std::abs(value), 1e-300);
    if (outer_err > 1e-8 * scale + 1e-300 || worst_inner > 1e-8 * scale * 10 + 1e-300) {
        throw QuadratureNotConverged("adaptive quadrature did not reach tolerance");
    }
    return value;
}

// Integration window for a Gaussian-shaped integrand centred at c with spread
// sd, truncated above at hi. When hi sits deep in the lower tail the window is
// anchored to hi instead of c so the tail mass is still resolved.
inline std::pair<double, double> window(double c, double sd, double hi, double halfwidth) {
    const double upper = std::min(hi, c + halfwidth * sd);
    const double lower = std::min(c - halfwidth * sd, upper - halfwidth * sd);
    return {lower, upper};
}

}  // namespace detail

/// Standard bivariate normal CDF by direct 2-D quadrature of the density.
inline double bvn_cdf_numeric(double h, double k, double rho) {
    if (h == -std::numeric_limits<double>::infinity() || k == -std::numeric_limits<double>::infinity()) return 0.0;
    const double s = std::sqrt(1.0 - rho * rho);
    const double norm = 1.0 / (2.0 * std::numbers::pi * s);
    auto density = [&](double x, double y) {
        return norm * std::exp(-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s * s));
    };
    QuadratureSpec spec;
    spec.rule = QuadratureRule::adaptive;
    spec.tolerance = 1e-11;
    const auto [a0, b0] = detail::window(0.0, 1.0, h, 9.0);
    const auto [a1, b1] = detail::window(0.0, 1.0, k, 9.0);
    return detail::integrate_2d(density, a0, b0, a1, b1, spec);
}

/// Joint density f(y1, y2, y3, y4) evaluated numerically as
///   f1(y1) f2(y2) sum_{j3,j4} (-1)^{j3+j4} C_12(F1, F2, u_{3,j3}, u_{4,j4})
/// where C_12 is the mixed second derivative of the Gaussian copula, itself a
/// 2-D integral over the binary latents. Binary margins are ordered so that
/// label 1 occupies the lower part of the latent: u_{j,1} = F(y-) and
/// u_{j,2} = F(y) with F(1) = p, F(0) = 1.
inline double joint_density_numeric(const copula::LabelVector& label, const copula::MarginalPrediction& pred,
                                    const copula::CopulaParams& params, const QuadratureSpec& spec = {}) {
    spec.validate();
    params.validate();
    copula::check_label(label);
    const Eigen::Matrix4d gamma = params.gamma.matrix();
    const Eigen::Matrix4d prec = gamma.inverse();
    const double det = gamma.determinant();

    const double q1 = (label.y1 - pred.mu1) / params.sigma1;
    const double q2 = (label.y2 - pred.mu2) / params.sigma2;
    const double p3 = 1.0 / (1.0 + std::exp(-pred.logit3));
    const double p4 = 1.0 / (1.0 + std::exp(-pred.logit4));
    const double p3c = std::clamp(p3, 1e-12, 1.0 - 1e-12);
    const double p4c = std::clamp(p4, 1e-12, 1.0 - 1e-12);

    // Integrand centre and spread from the precision blocks.
    const Eigen::Matrix2d p22 = prec.bottomRightCorner<2, 2>();
    const Eigen::Matrix2d p21 = prec.bottomLeftCorner<2, 2>();
    const Eigen::Vector2d q(q1, q2);
    const Eigen::Matrix2d cov = p22.inverse();
    const Eigen::Vector2d centre = -cov * p21 * q;
    const double sd3 = std::sqrt(cov(0, 0));
    const double sd4 = std::sqrt(cov(1, 1));

    const double lead = 1.0 / (2.0 * std::numbers::pi * std::sqrt(det));
    auto integrand = [&](double x3, double x4) {
        Eigen::Vector4d v(q1, q2, x3, x4);
        return lead * std::exp(-0.5 * v.dot(prec * v) + 0.5 * (q1 * q1 + q2 * q2));
    };
    auto copula_derivative = [&](double u3, double u4) {
        const double hi3 = detail::quantile(u3);
        const double hi4 = detail::quantile(u4);
        if (std::isinf(hi3) && hi3 < 0) return 0.0;
        if (std::isinf(hi4) && hi4 < 0) return 0.0;
        const auto [a3, b3] = detail::window(centre(0), sd3, hi3, spec.domain_halfwidth);
        const auto [a4, b4] = detail::window(centre(1), sd4, hi4, spec.domain_halfwidth);
        return detail::integrate_2d(integrand, a3, b3, a4, b4, spec);
    };

    auto bounds = [](int y, double p) {
        // (F(y-), F(y)) under the ordering label 1 < label 0.
        return y == 1 ? std::pair{0.0, p} : std::pair{p, 1.0};
    };
    const auto [u31, u32] = bounds(label.y3, p3c);
    const auto [u41, u42] = bounds(label.y4, p4c);
    const double u3[2] = {u31, u32};
    const double u4[2] = {u41, u42};
    double sum = 0.0;
    for (int j3 = 1; j3 <= 2; ++j3) {
        for (int j4 = 1; j4 <= 2; ++j4) {
            const double sign = ((j3 + j4) % 2 == 0) ? 1.0 : -1.0;
            sum += sign * copula_derivative(u3[j3 - 1], u4[j4 - 1]);
        }
    }
    const double f1 = detail::phi(q1) / params.sigma1;
    const double f2 = detail::phi(q2) / params.sigma2;
    return f1 * f2 * sum;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> point, double step) {
    if (!(step > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
    std::vector<double> x(point.begin(), point.end());
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = f(x);
        x[i] = orig - step;
        const double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

struct MassEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
};

namespace detail {

inline double total_binary_density(double y1, double y2, const copula::MarginalPrediction& pred,
                                   const copula::CopulaParams& params, double log_const) {
    double total = 0.0;
    for (int y3 = 0; y3 <= 1; ++y3) {
        for (int y4 = 0; y4 <= 1; ++y4) {
            total += std::exp(copula::log_joint_density({y1, y2, y3, y4}, pred, params) + log_const);
        }
    }
    return total;
}

}  // namespace detail

/// Total mass of the closed-form density, summed over the four binary cells
/// and integrated over (y1, y2) on [mu +- halfwidth sigma]^2 by tensor
/// Gauss-Legendre. The error field is the change against a half-resolution grid.
inline MassEstimate normalization_quadrature(const copula::MarginalPrediction& pred, const copula::CopulaParams& params,
                                             int nodes_per_axis = 96, double halfwidth = 8.0) {
    const double c = copula::log_density_constant(params);
    auto run = [&](int nodes) {
        const CompositeRule rule(nodes);
        return rule.integrate(
            [&](double y1) {
                return rule.integrate([&](double y2) { return detail::total_binary_density(y1, y2, pred, params, c); },
                                      pred.mu2 - halfwidth * params.sigma2, pred.mu2 + halfwidth * params.sigma2);
            },
            pred.mu1 - halfwidth * params.sigma1, pred.mu1 + halfwidth * params.sigma1);
    };
    const double fine = run(nodes_per_axis);
    const double coarse = run(nodes_per_axis / 2);
    return {fine, std::abs(fine - coarse)};
}

/// Importance-sampling estimate of the total mass of the closed-form density.
/// Proposal: independent normals with twice the marginal scales, which keeps
/// the weight variance finite for every valid Gamma.
inline MassEstimate mc_normalization(const copula::MarginalPrediction& pred, const copula::CopulaParams& params,
                                     std::size_t n_samples, std::uint64_t seed) {
    if (n_samples < 100000) throw DomainError("mc_normalization: need at least 1e5 samples");
    const double c = copula::log_density_constant(params);
    Rng rng(seed);
    const double s1 = 2.0 * params.sigma1;
    const double s2 = 2.0 * params.sigma2;
    double sum = 0.0;
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const double e1 = rng.normal();
        const double e2 = rng.normal();
        const double y1 = pred.mu1 + s1 * e1;
        const double y2 = pred.mu2 + s2 * e2;
        const double proposal = detail::phi(e1) / s1 * detail::phi(e2) / s2;
        const double w = detail::total_binary_density(y1, y2, pred, params, c) / proposal;
        sum += w;
        sum_sq += w * w;
    }
    const double n = static_cast<double>(n_samples);
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    return {mean, std::sqrt(var / n)};
}

// ---------------------------------------------------------------------------
// Check suite shared by the `oracle-check` command and the acceptance run.

/// Random correlation matrix with off-diagonals up to `max_abs` in magnitude
/// and smallest eigenvalue at least `min_eig`.
inline copula::CorrelationMatrix4 random_gamma(Rng& rng, double max_abs = 0.7, double min_eig = 0.05) {
    for (;;) {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        for (int i = 0; i < 4; ++i) {
            for (int j = i + 1; j < 4; ++j) m(i, j) = m(j, i) = rng.uniform(-max_abs, max_abs);
        }
        if (copula::CorrelationMatrix4::min_eigenvalue_of(m) >= min_eig) {
            return copula::CorrelationMatrix4::from_matrix(m);
        }
    }
}

inline copula::CopulaParams random_params(Rng& rng, double max_abs = 0.7) {
    copula::CopulaParams p;
    p.gamma = random_gamma(rng, max_abs);
    p.sigma1 = rng.uniform(0.5, 2.0);
    p.sigma2 = rng.uniform(0.5, 2.0);
    return p;
}

struct CheckCase {
    copula::CopulaParams params;
    copula::MarginalPrediction pred;
    copula::LabelVector label;
};

/// Random parameters and predictions; the label is drawn from the model
/// itself so cases cover the region where the density has mass.
inline CheckCase random_case(Rng& rng, double logit_range = 4.0) {
    CheckCase c;
    c.params = random_params(rng);
    c.pred = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-logit_range, logit_range),
              rng.uniform(-logit_range, logit_range)};
    const copula::Marginals m{c.pred.mu1, c.pred.mu2, copula::sigmoid(c.pred.logit3), copula::sigmoid(c.pred.logit4)};
    c.label = copula::draw_label(c.params, copula::cholesky_lower(c.params.gamma), m, rng);
    return c;
}

struct CheckResult {
    std::string name;
    int cases = 0;
    int floored = 0;  // closed-form rectangle floor hit (still compared)
    double max_err = 0.0;
    double tolerance = 0.0;
    bool relative = true;
    bool pass() const { return std::isfinite(max_err) && max_err <= tolerance; }
};

inline double relative_error(double a, double b, double floor = 0.0) {
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

/// Closed-form density (constant restored) against the quadrature oracle.
inline CheckResult check_density(int cases, std::uint64_t seed, double tol = 1e-5) {
    Rng rng(seed, {0xde});
    CheckResult r{"density_vs_quadrature", cases, 0, 0.0, tol, true};
    for (int i = 0; i < cases; ++i) {
        const auto c = random_case(rng);
        const std::vector<copula::LabelVector> ls{c.label};
        const std::vector<copula::MarginalPrediction> ps{c.pred};
        r.floored += static_cast<int>(copula::copula_loss(ls, ps, c.params).floor_events);
        const double closed =
            std::exp(copula::log_joint_density(c.label, c.pred, c.params) + copula::log_density_constant(c.params));
        r.max_err = std::max(r.max_err, relative_error(closed, joint_density_numeric(c.label, c.pred, c.params)));
    }
    return r;
}

/// |total mass - 1| of the closed-form density over random parameter sets.
inline CheckResult check_normalization(int sets, std::uint64_t seed, double tol = 1e-3) {
    Rng rng(seed, {0x40});
    CheckResult r{"normalization", sets, 0, 0.0, tol, false};
    for (int i = 0; i < sets; ++i) {
        const auto c = random_case(rng, 2.0);
        r.max_err = std::max(r.max_err, std::abs(normalization_quadrature(c.pred, c.params).estimate - 1.0));
    }
    return r;
}

/// Analytic loss gradient against central differences. Every fourth case
/// pushes one or both fitted probabilities to 1e-5 or 1 - 1e-5.
inline CheckResult check_loss_gradients(int cases, std::uint64_t seed, double tol = 1e-4) {
    Rng rng(seed, {0x9d});
    CheckResult r{"loss_gradient_vs_finite_difference", cases, 0, 0.0, tol, true};
    const double extreme = std::log(1e-5 / (1 - 1e-5));
    for (int i = 0; i < cases; ++i) {
        auto c = random_case(rng);
        if (i % 4 == 0) {
            c.pred.logit3 = rng.uniform() < 0.5 ? extreme : -extreme;
            if (i % 8 == 0) c.pred.logit4 = rng.uniform() < 0.5 ? extreme : -extreme;
            c.label.y3 = rng.uniform() < 0.5;
            c.label.y4 = rng.uniform() < 0.5;
        }
        const std::vector<copula::LabelVector> ls{c.label};
        auto loss_at = [&](std::span<const double> x) {
            const std::vector<copula::MarginalPrediction> ps{{x[0], x[1], x[2], x[3]}};
            return copula::copula_loss(ls, ps, c.params).loss;
        };
        const std::vector<double> x{c.pred.mu1, c.pred.mu2, c.pred.logit3, c.pred.logit4};
        const std::vector<copula::MarginalPrediction> ps{c.pred};
        const auto analytic = copula::copula_loss(ls, ps, c.params);
        r.floored += static_cast<int>(analytic.floor_events);
        const auto& g = analytic.grads[0];
        const double a[] = {g.d_mu1, g.d_mu2, g.d_logit3, g.d_logit4};
        for (std::size_t k = 0; k < 4; ++k) {
            std::vector<double> xk = x;
            auto fk = [&](std::span<const double> v) {
                xk[k] = v[0];
                return loss_at(xk);
            };
            const double h = 1e-5 * std::max(1.0, std::abs(x[k]));
            const double fd = finite_diff_grad(fk, std::span<const double>(&x[k], 1), h)[0];
            // Gradients below 1e-6 in magnitude are compared absolutely.
            r.max_err = std::max(r.max_err, relative_error(a[k], fd, 1e-6));
        }
    }
    return r;
}

/// Closed-form bivariate normal CDF against direct quadrature.
inline CheckResult check_bvn(int triples, std::uint64_t seed, double tol = 1e-7) {
    Rng rng(seed, {0xb7});
    CheckResult r{"bvn_cdf_vs_quadrature", triples, 0, 0.0, tol, false};
    for (int i = 0; i < triples; ++i) {
        const double h = rng.uniform(-4, 4);
        const double k = rng.uniform(-4, 4);
        const double rho = rng.uniform(-0.99, 0.99);
        r.max_err = std::max(r.max_err, std::abs(numcore::bvn_cdf(h, k, rho).value - bvn_cdf_numeric(h, k, rho)));
    }
    return r;
}

/// Phi2(0, 0; rho) = 1/4 + asin(rho) / (2 pi) for rho in {-0.9, ..., 0.9}.
inline CheckResult check_bvn_orthant(double tol = 1e-9) {
    CheckResult r{"bvn_orthant_identity", 19, 0, 0.0, tol, false};
    for (int i = -9; i <= 9; ++i) {
        const double rho = 0.1 * i;
        const double exact = 0.25 + std::asin(rho) / (2.0 * std::numbers::pi);
        r.max_err = std::max(r.max_err, std::abs(numcore::bvn_cdf(0.0, 0.0, rho).value - exact));
    }
    return r;
}

}  // namespace oucovit::oracle
