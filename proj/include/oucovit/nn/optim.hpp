#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "oucovit/nn/tensor.hpp"

namespace oucovit::nn {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list. Only tensors that require gradients are
/// ever written, so frozen weights stay bit-identical.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) {
            m_.push_back(Mat::Zero(p.rows(), p.cols()));
            v_.push_back(Mat::Zero(p.rows(), p.cols()));
        }
    }

    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.requires_grad() || !p.has_grad()) continue;
            const Mat& g = p.grad();
            m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
            v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
            p.mutable_value().array() -=
                lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opts_.eps);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamOptions opts_;
    std::vector<Mat> m_, v_;
    long t_ = 0;
};

}  // namespace oucovit::nn
