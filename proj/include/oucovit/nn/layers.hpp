#pragma once

#include <cmath>
#include <string>

#include "oucovit/nn/tensor.hpp"
#include "oucovit/random.hpp"

namespace oucovit::nn {

enum class Eye { os = 0, od = 1 };

inline const char* eye_name(Eye e) { return e == Eye::os ? "os" : "od"; }

inline Mat normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
    return m;
}

/// Frozen affine map W x + b with an optional trainable low-rank update
/// (alpha / r) * B A x. Rank 0 means a plain frozen layer.
struct LoraLinear {
    Tensor w, b;  // frozen
    Tensor a, bb;  // trainable; undefined when rank == 0
    int rank = 0;
    double alpha = 0.0;

    static LoraLinear make(Rng& rng, Eigen::Index d_in, Eigen::Index d_out, int rank, double alpha) {
        LoraLinear l;
        l.w = Tensor::leaf(normal_matrix(rng, d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in))), false);
        l.b = Tensor::leaf(Mat::Zero(1, d_out), false);
        l.rank = rank;
        l.alpha = alpha;
        if (rank > 0) {
            l.a = Tensor::leaf(normal_matrix(rng, rank, d_in, 1.0 / std::sqrt(static_cast<double>(rank))), true);
            l.bb = Tensor::leaf(Mat::Zero(d_out, rank), true);
        }
        return l;
    }

    bool has_lora() const { return rank > 0; }

    /// `use_lora = false` gives the frozen layer alone.
    Tensor forward(const Tensor& x, bool use_lora = true) const {
        Tensor base = linear(x, w, b);
        if (!use_lora || rank == 0) return base;
        return add(base, scale(linear(linear(x, a), bb), alpha / rank));
    }
};

/// Bottleneck branch s * up(ReLU(down(x))) owned by one eye. `up` starts at
/// zero so the branch contributes exactly nothing at initialization.
struct EyeAdapter {
    Tensor down;  // [d_hat, D]
    Tensor up;    // [D, d_hat]
    double scale_factor = 0.1;
    Eye eye = Eye::os;

    static EyeAdapter make(Rng& rng, Eigen::Index dim, int d_hat, double s, Eye e) {
        EyeAdapter ad;
        ad.down = Tensor::leaf(normal_matrix(rng, d_hat, dim, 1.0 / std::sqrt(static_cast<double>(dim))), true);
        ad.up = Tensor::leaf(Mat::Zero(dim, d_hat), true);
        ad.scale_factor = s;
        ad.eye = e;
        return ad;
    }

    Tensor branch(const Tensor& x) const { return scale(linear(relu(linear(x, down)), up), scale_factor); }
};

}  // namespace oucovit::nn
