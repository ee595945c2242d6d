// Evaluates the closed-form copula density on a handful of labelled samples,
// compares it with the quadrature oracle, and shows how the loss changes as
// the between-eye correlation grows.

#include <cmath>
#include <iomanip>
#include <iostream>

#include "oucovit/copula.hpp"
#include "oucovit/oracle.hpp"

using namespace oucovit;

int main() {
    const copula::MarginalPrediction pred{24.0, 24.2, 0.4, 0.1};
    const copula::LabelVector agree{24.6, 24.9, 1, 1};
    const copula::LabelVector disagree{24.6, 23.5, 1, 0};

    std::cout << std::setw(8) << "gamma" << std::setw(16) << "-log f(agree)" << std::setw(18) << "-log f(disagree)"
              << std::setw(14) << "oracle ratio" << "\n";
    for (double g : {0.0, 0.3, 0.6, 0.9}) {
        copula::CopulaParams params;
        params.gamma = copula::CorrelationMatrix4::from_entries(g, 0.3 * g, 0.3 * g, 0.3 * g, 0.3 * g, g);
        params.sigma1 = params.sigma2 = 0.5;
        const double c = copula::log_density_constant(params);
        const double a = copula::log_joint_density(agree, pred, params) + c;
        const double d = copula::log_joint_density(disagree, pred, params) + c;
        const double ratio = std::exp(a) / oracle::joint_density_numeric(agree, pred, params);
        std::cout << std::fixed << std::setprecision(2) << std::setw(8) << g << std::setprecision(4) << std::setw(16)
                  << -a << std::setw(18) << -d << std::setprecision(10) << std::setw(14) << ratio << "\n";
    }
    std::cout << "\nStronger coupling rewards concordant eyes and penalises discordant ones;\n"
                 "the oracle ratio stays at 1.\n";
}
