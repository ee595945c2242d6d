#pragma once

// Four-dimensional Gaussian copula for two continuous labels (axial length,
// one per eye) and two binary labels (high-myopia status, one per eye).
//
// Latent orientation: a binary label equals 1 exactly when its latent Gaussian
// score lies at or below the threshold Phi^{-1}(p). Density, sampling and
// estimation all use this orientation.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oucovit/errors.hpp"
#include "oucovit/numcore.hpp"
#include "oucovit/random.hpp"

namespace oucovit::copula {

/// Smallest eigenvalue a copula correlation matrix may have.
inline constexpr double kMinEigenvalue = 1e-4;
/// Rectangle probabilities below this are floored (and counted).
inline constexpr double kRectangleFloor = 1e-12;

/// Symmetric 4x4 correlation matrix with unit diagonal and smallest eigenvalue
/// at least kMinEigenvalue. Index order: AL-OS, AL-OD, HM-OS, HM-OD.
class CorrelationMatrix4 {
public:
    CorrelationMatrix4() : m_(Eigen::Matrix4d::Identity()) {}

    static CorrelationMatrix4 identity() { return {}; }

    /// Builds from the six upper-triangular entries; throws DomainError when
    /// the result violates an invariant.
    static CorrelationMatrix4 from_entries(double g12, double g13, double g14, double g23,
                                           double g24, double g34) {
        Eigen::Matrix4d m;
        m << 1, g12, g13, g14,
             g12, 1, g23, g24,
             g13, g23, 1, g34,
             g14, g24, g34, 1;
        return from_matrix(m);
    }

    static CorrelationMatrix4 from_matrix(const Eigen::Matrix4d& m) {
        check_structure(m);
        const double lo = min_eigenvalue_of(m);
        // Projection output sits at kMinEigenvalue up to rounding.
        if (lo < kMinEigenvalue * (1.0 - 1e-6)) {
            throw DomainError("correlation matrix: smallest eigenvalue " + std::to_string(lo) +
                              " below " + std::to_string(kMinEigenvalue));
        }
        CorrelationMatrix4 out;
        out.m_ = m;
        return out;
    }

    double operator()(int t, int j) const { return m_(t, j); }
    const Eigen::Matrix4d& matrix() const noexcept { return m_; }

    Eigen::Matrix2d continuous_block() const { return m_.topLeftCorner<2, 2>(); }
    Eigen::Matrix2d cross_block() const { return m_.bottomLeftCorner<2, 2>(); }  // Gamma_21
    Eigen::Matrix2d binary_block() const { return m_.bottomRightCorner<2, 2>(); }

    double min_eigenvalue() const { return min_eigenvalue_of(m_); }

    bool is_identity() const { return m_ == Eigen::Matrix4d::Identity(); }

    static double min_eigenvalue_of(const Eigen::Matrix4d& m) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(m, Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    }

    static void check_structure(const Eigen::Matrix4d& m) {
        for (int i = 0; i < 4; ++i) {
            if (m(i, i) != 1.0) throw DomainError("correlation matrix: diagonal must be 1");
            for (int j = 0; j < 4; ++j) {
                if (!std::isfinite(m(i, j))) throw DomainError("correlation matrix: non-finite entry");
                if (m(i, j) != m(j, i)) throw DomainError("correlation matrix: not symmetric");
                if (std::abs(m(i, j)) > 1.0) throw DomainError("correlation matrix: |entry| > 1");
            }
        }
    }

private:
    Eigen::Matrix4d m_;
};

/// Provenance attached to estimated parameters.
struct ParamsMeta {
    std::string source_run;
    std::size_t sample_count = 0;
    std::string split = "train";
    int fold = -1;
    std::string config_digest;
};

struct CopulaParams {
    CorrelationMatrix4 gamma;
    double sigma1 = 1.0;
    double sigma2 = 1.0;
    ParamsMeta meta;

    void validate() const {
        if (!(sigma1 > 0.0) || !std::isfinite(sigma1)) throw DomainError("sigma1 must be positive");
        if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw DomainError("sigma2 must be positive");
    }
};

struct LabelVector {
    double y1 = 0.0;  // AL-OS
    double y2 = 0.0;  // AL-OD
    int y3 = 0;       // HM-OS
    int y4 = 0;       // HM-OD
};

struct MarginalPrediction {
    double mu1 = 0.0;
    double mu2 = 0.0;
    double logit3 = 0.0;
    double logit4 = 0.0;
};

/// Distribution of the two binary latents given the continuous Gaussian scores.
struct ConditionalLatent {
    double mc3 = 0.0;
    double mc4 = 0.0;
    double s3 = 1.0;
    double s4 = 1.0;
    double rho_c = 0.0;
};

/// Partials of the per-sample loss with respect to MarginalPrediction.
struct LossGrad {
    double d_mu1 = 0.0;
    double d_mu2 = 0.0;
    double d_logit3 = 0.0;
    double d_logit4 = 0.0;
};

struct RectangleProb {
    double value = 0.0;
    bool floored = false;
};

struct LossResult {
    double loss = 0.0;
    std::vector<LossGrad> grads;
    std::size_t floor_events = 0;
};

// ---------------------------------------------------------------------------
// Gaussian scores

inline double gaussian_score_continuous(double y, double mu, double sigma) {
    if (!(sigma > 0.0)) throw DomainError("gaussian_score_continuous: sigma must be positive");
    return (y - mu) / sigma;
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Gaussian score of a binary label with success probability sigmoid(logit).
inline double binary_threshold(double logit) {
    return numcore::std_normal_inv_cdf(sigmoid(logit), /*clamp=*/true);
}

/// d binary_threshold / d logit = p (1 - p) / phi(t); zero where the clamp is active.
inline double binary_threshold_derivative(double logit, double threshold) {
    const double p = sigmoid(logit);
    if (p <= numcore::kProbClamp || p >= 1.0 - numcore::kProbClamp) return 0.0;
    return p * sigmoid(-logit) / numcore::std_normal_pdf(threshold);
}

// ---------------------------------------------------------------------------
// Closed-form density

/// Everything about the density that depends only on Gamma: Gamma_11^{-1},
/// the regression of binary latents on continuous scores, and the Schur
/// complement (conditional covariance).
struct ConditioningKernel {
    Eigen::Matrix2d precision11;  // Gamma_11^{-1}
    Eigen::Matrix2d regression;   // Gamma_21 Gamma_11^{-1}
    double s3 = 1.0;
    double s4 = 1.0;
    double rho_c = 0.0;

    static ConditioningKernel from(const CorrelationMatrix4& gamma) {
        const Eigen::Matrix2d g11 = gamma.continuous_block();
        const Eigen::Matrix2d g21 = gamma.cross_block();
        const Eigen::Matrix2d g22 = gamma.binary_block();
        const double det = g11(0, 0) * g11(1, 1) - g11(0, 1) * g11(1, 0);
        if (!(det > 0.0)) throw DegenerateCorrelation("Gamma_11 is singular");
        Eigen::Matrix2d inv;
        inv << g11(1, 1), -g11(0, 1), -g11(1, 0), g11(0, 0);
        inv /= det;

        ConditioningKernel k;
        k.precision11 = inv;
        k.regression = g21 * inv;
        const Eigen::Matrix2d schur = g22 - k.regression * g21.transpose();
        if (schur(0, 0) <= kMinEigenvalue || schur(1, 1) <= kMinEigenvalue) {
            throw DegenerateCorrelation("Schur complement diagonal below minimum eigenvalue");
        }
        k.s3 = std::sqrt(schur(0, 0));
        k.s4 = std::sqrt(schur(1, 1));
        k.rho_c = numcore::clamp_rho(0.5 * (schur(0, 1) + schur(1, 0)) / (k.s3 * k.s4));
        return k;
    }

    ConditionalLatent at(const Eigen::Vector2d& q) const {
        const Eigen::Vector2d mc = regression * q;
        return {mc(0), mc(1), s3, s4, rho_c};
    }
};

inline ConditionalLatent conditional_latent(const Eigen::Vector2d& q, const CorrelationMatrix4& gamma) {
    return ConditioningKernel::from(gamma).at(q);
}

namespace detail {

struct RectangleEval {
    RectangleProb prob;
    double d_a = 0.0;  // dP/dA
    double d_b = 0.0;  // dP/dB
};

// With sign flips s = +1 (label 1, latent below threshold) or -1 (label 0,
// latent above), every case is one bivariate CDF:
//   P = Phi_2(s3 A, s4 B; s3 s4 rho_c)
// which equals the inclusion-exclusion forms without their cancellation.
inline RectangleEval rectangle_eval(int y3, int y4, double t3, double t4, const ConditionalLatent& c) {
    const double a = (t3 - c.mc3) / c.s3;
    const double b = (t4 - c.mc4) / c.s4;
    const double sa = y3 == 1 ? 1.0 : -1.0;
    const double sb = y4 == 1 ? 1.0 : -1.0;
    const numcore::BvnArgs args{sa * a, sb * b, sa * sb * c.rho_c};
    RectangleEval r;
    const double p = numcore::bvn_cdf(args);
    if (p < kRectangleFloor) {
        r.prob = {kRectangleFloor, true};
        return r;
    }
    r.prob = {p, false};
    r.d_a = sa * numcore::bvn_cdf_dh(args);
    r.d_b = sb * numcore::bvn_cdf_dk(args);
    return r;
}

}  // namespace detail

/// Conditional probability of the binary outcome pair given the continuous
/// scores. (y3, y4) = (1, 1) is Phi_2(A, B; rho_c); the other cells follow by
/// inclusion-exclusion. Floored at kRectangleFloor.
inline RectangleProb rectangle_prob(int y3, int y4, double t3, double t4, const ConditionalLatent& cond) {
    return detail::rectangle_eval(y3, y4, t3, t4, cond).prob;
}

inline void check_label(const LabelVector& l) {
    if ((l.y3 != 0 && l.y3 != 1) || (l.y4 != 0 && l.y4 != 1)) {
        throw DomainError("binary labels must be 0 or 1");
    }
    if (!std::isfinite(l.y1) || !std::isfinite(l.y2)) throw DomainError("continuous labels must be finite");
}

/// Additive constant dropped from the log density:
/// -log(2 pi) - 1/2 log det Gamma_11 - log sigma1 - log sigma2.
inline double log_density_constant(const CopulaParams& params) {
    const Eigen::Matrix2d g11 = params.gamma.continuous_block();
    const double det = g11.determinant();
    return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det) - std::log(params.sigma1) -
           std::log(params.sigma2);
}

namespace detail {

struct SampleEval {
    double log_density = 0.0;
    LossGrad grad;  // of the negative log density
    bool floored = false;
};

inline SampleEval evaluate_sample(const LabelVector& label, const MarginalPrediction& pred,
                                  const CopulaParams& params, const ConditioningKernel& kernel) {
    check_label(label);
    const Eigen::Vector2d q(gaussian_score_continuous(label.y1, pred.mu1, params.sigma1),
                            gaussian_score_continuous(label.y2, pred.mu2, params.sigma2));
    const double t3 = binary_threshold(pred.logit3);
    const double t4 = binary_threshold(pred.logit4);
    const ConditionalLatent cond = kernel.at(q);
    const RectangleEval rect = rectangle_eval(label.y3, label.y4, t3, t4, cond);

    const Eigen::Vector2d mq = kernel.precision11 * q;
    SampleEval out;
    out.log_density = -0.5 * q.dot(mq) + std::log(rect.prob.value);
    out.floored = rect.prob.floored;

    // Loss = 1/2 q' M q - log P.
    const double dl_da = -rect.d_a / rect.prob.value;
    const double dl_db = -rect.d_b / rect.prob.value;
    const Eigen::Vector2d dl_dmc(-dl_da / cond.s3, -dl_db / cond.s4);
    const Eigen::Vector2d dl_dq = mq + kernel.regression.transpose() * dl_dmc;
    out.grad.d_mu1 = -dl_dq(0) / params.sigma1;
    out.grad.d_mu2 = -dl_dq(1) / params.sigma2;
    out.grad.d_logit3 = dl_da / cond.s3 * binary_threshold_derivative(pred.logit3, t3);
    out.grad.d_logit4 = dl_db / cond.s4 * binary_threshold_derivative(pred.logit4, t4);
    return out;
}

}  // namespace detail

/// Log joint density of one labelled sample with the constant
/// `log_density_constant(params)` dropped.
inline double log_joint_density(const LabelVector& label, const MarginalPrediction& pred,
                                const CopulaParams& params) {
    params.validate();
    const auto kernel = ConditioningKernel::from(params.gamma);
    return detail::evaluate_sample(label, pred, params, kernel).log_density;
}

/// Negative log-likelihood over a batch (constants dropped) with exact
/// per-sample partials. Summation runs in sample order.
inline LossResult copula_loss(std::span<const LabelVector> labels, std::span<const MarginalPrediction> preds,
                              const CopulaParams& params) {
    if (labels.empty()) throw DomainError("copula_loss: empty batch");
    if (labels.size() != preds.size()) throw DomainError("copula_loss: labels/predictions size mismatch");
    params.validate();
    const auto kernel = ConditioningKernel::from(params.gamma);
    LossResult out;
    out.grads.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto s = detail::evaluate_sample(labels[i], preds[i], params, kernel);
        out.loss -= s.log_density;
        out.grads.push_back(s.grad);
        out.floor_events += s.floored ? 1 : 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Estimation

/// Sample standard deviation (n - 1 denominator), two-pass.
inline double sample_sd(std::span<const double> v) {
    if (v.size() < 2) throw DegenerateInput("sample_sd: need at least two values");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline std::pair<double, double> estimate_sigmas(std::span<const double> residuals_os,
                                                 std::span<const double> residuals_od) {
    const double s1 = sample_sd(residuals_os);
    const double s2 = sample_sd(residuals_od);
    if (!(s1 > 0.0) || !(s2 > 0.0)) throw DegenerateInput("estimate_sigmas: constant residuals");
    return {s1, s2};
}

/// Pearson correlation by the two-pass mean/covariance formula.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DegenerateInput("pearson: length mismatch");
    const auto n = static_cast<double>(a.size());
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0.0;
    double sbb = 0.0;
    double sab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) throw DegenerateInput("pearson: zero-variance input");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Nearest-PD repair: clip eigenvalues at kMinEigenvalue, rebuild, rescale to
/// unit diagonal, repeat until the smallest eigenvalue clears the bound.
/// Inputs that already satisfy the bound are returned unchanged.
inline CorrelationMatrix4 project_correlation(const Eigen::Matrix4d& input) {
    Eigen::Matrix4d m = 0.5 * (input + input.transpose());
    for (int i = 0; i < 4; ++i) {
        if (!std::isfinite(m(i, i)) || std::abs(m(i, i) - 1.0) > 1e-12) {
            throw DomainError("project_correlation: diagonal must be 1");
        }
        m(i, i) = 1.0;
    }
    m = m.cwiseMax(-1.0).cwiseMin(1.0);
    if (CorrelationMatrix4::min_eigenvalue_of(m) >= kMinEigenvalue) return CorrelationMatrix4::from_matrix(m);

    for (int iter = 0; iter < 200; ++iter) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(m);
        // Clip slightly above the bound so the rescale cannot push it back under.
        const Eigen::Vector4d clipped = es.eigenvalues().cwiseMax(kMinEigenvalue * (1.0 + 1e-3));
        Eigen::Matrix4d rebuilt = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
        const Eigen::Vector4d inv_sd = rebuilt.diagonal().cwiseSqrt().cwiseInverse();
        rebuilt = inv_sd.asDiagonal() * rebuilt * inv_sd.asDiagonal();
        rebuilt = 0.5 * (rebuilt + rebuilt.transpose()).eval();
        rebuilt = rebuilt.cwiseMax(-1.0).cwiseMin(1.0);
        for (int i = 0; i < 4; ++i) rebuilt(i, i) = 1.0;
        m = rebuilt;
        if (CorrelationMatrix4::min_eigenvalue_of(m) >= kMinEigenvalue) break;
    }
    return CorrelationMatrix4::from_matrix(m);
}

/// Pairwise Pearson correlations of the Gaussian scores assembled into Gamma
/// and repaired to positive definiteness. `z1`, `z2` are standardized
/// residuals; `s3`, `s4` are Phi^{-1}(sigmoid(logit)) of the fitted
/// probabilities.
inline CorrelationMatrix4 estimate_gamma(std::span<const double> z1, std::span<const double> z2,
                                         std::span<const double> s3, std::span<const double> s4) {
    const std::size_t n = z1.size();
    if (z2.size() != n || s3.size() != n || s4.size() != n) {
        throw DegenerateInput("estimate_gamma: vectors must have equal length");
    }
    if (n < 3) throw DegenerateInput("estimate_gamma: need at least three samples");
    const std::array<std::span<const double>, 4> cols{z1, z2, s3, s4};
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    for (int t = 0; t < 4; ++t) {
        for (int j = t + 1; j < 4; ++j) {
            m(t, j) = m(j, t) = pearson(cols[t], cols[j]);
        }
    }
    return project_correlation(m);
}

/// Unprojected pairwise estimate, exposed for diagnostics and tests.
inline Eigen::Matrix4d pairwise_gamma(std::span<const double> z1, std::span<const double> z2,
                                      std::span<const double> s3, std::span<const double> s4) {
    const std::array<std::span<const double>, 4> cols{z1, z2, s3, s4};
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    for (int t = 0; t < 4; ++t) {
        for (int j = t + 1; j < 4; ++j) m(t, j) = m(j, t) = pearson(cols[t], cols[j]);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Sampling

/// Marginal parameters of one draw: means of the continuous labels and success
/// probabilities of the binary labels.
struct Marginals {
    double mu1 = 0.0;
    double mu2 = 0.0;
    double p3 = 0.5;
    double p4 = 0.5;
};

/// Draws one label vector: latent z ~ N(0, Gamma), y_m = mu_m + sigma_m z_m,
/// binary label 1 iff its latent is at or below Phi^{-1}(p).
inline LabelVector draw_label(const CopulaParams& params, const Eigen::Matrix4d& chol_lower,
                              const Marginals& m, Rng& rng) {
    Eigen::Vector4d e;
    for (int i = 0; i < 4; ++i) e(i) = rng.normal();
    const Eigen::Vector4d z = chol_lower * e;
    LabelVector out;
    out.y1 = m.mu1 + params.sigma1 * z(0);
    out.y2 = m.mu2 + params.sigma2 * z(1);
    out.y3 = z(2) <= numcore::std_normal_inv_cdf(m.p3, true) ? 1 : 0;
    out.y4 = z(3) <= numcore::std_normal_inv_cdf(m.p4, true) ? 1 : 0;
    return out;
}

inline Eigen::Matrix4d cholesky_lower(const CorrelationMatrix4& gamma) {
    Eigen::LLT<Eigen::Matrix4d> llt(gamma.matrix());
    if (llt.info() != Eigen::Success) throw DegenerateCorrelation("Gamma is not positive definite");
    return llt.matrixL();
}

inline std::vector<LabelVector> sample_copula(const CopulaParams& params, const Marginals& marginals,
                                              std::size_t n, std::uint64_t seed) {
    params.validate();
    if (!(marginals.p3 > 0.0 && marginals.p3 < 1.0 && marginals.p4 > 0.0 && marginals.p4 < 1.0)) {
        throw DomainError("sample_copula: binary probabilities must lie in (0, 1)");
    }
    const Eigen::Matrix4d l = cholesky_lower(params.gamma);
    Rng rng(seed);
    std::vector<LabelVector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(draw_label(params, l, marginals, rng));
    return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const CopulaParams& p) {
    nlohmann::json g = nlohmann::json::array();
    for (int i = 0; i < 4; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < 4; ++j) row.push_back(p.gamma(i, j));
        g.push_back(row);
    }
    return {{"gamma", g},
            {"sigma1", p.sigma1},
            {"sigma2", p.sigma2},
            {"meta",
             {{"source_run", p.meta.source_run},
              {"sample_count", p.meta.sample_count},
              {"split", p.meta.split},
              {"fold", p.meta.fold},
              {"config_digest", p.meta.config_digest}}}};
}

inline CopulaParams params_from_json(const nlohmann::json& j) {
    try {
        Eigen::Matrix4d m;
        const auto& g = j.at("gamma");
        if (!g.is_array() || g.size() != 4) throw FormatError("gamma must be a 4x4 array");
        for (int r = 0; r < 4; ++r) {
            if (!g[r].is_array() || g[r].size() != 4) throw FormatError("gamma must be a 4x4 array");
            for (int c = 0; c < 4; ++c) m(r, c) = g[r][c].get<double>();
        }
        CopulaParams p;
        p.gamma = CorrelationMatrix4::from_matrix(m);
        p.sigma1 = j.at("sigma1").get<double>();
        p.sigma2 = j.at("sigma2").get<double>();
        if (j.contains("meta")) {
            const auto& meta = j["meta"];
            p.meta.source_run = meta.value("source_run", "");
            p.meta.sample_count = meta.value("sample_count", std::size_t{0});
            p.meta.split = meta.value("split", "train");
            p.meta.fold = meta.value("fold", -1);
            p.meta.config_digest = meta.value("config_digest", "");
        }
        p.validate();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("copula params: ") + e.what());
    }
}

}  // namespace oucovit::copula
