#pragma once

// Minimal reverse-mode tensor engine. Every tensor is a row-major matrix;
// batched activations stack samples (and tokens) along rows. Operations whose
// inputs need no gradient record nothing, so frozen inference is tape-free.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "oucovit/errors.hpp"

namespace oucovit::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
    Mat value;
    Mat grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Mat& grad_buffer() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Mat value) { return Tensor(std::move(value), false); }
    static Tensor leaf(Mat value, bool requires_grad) { return Tensor(std::move(value), requires_grad); }

    std::vector<std::size_t> shape() const {
        return {static_cast<std::size_t>(node_->value.rows()), static_cast<std::size_t>(node_->value.cols())};
    }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    Eigen::Index size() const { return node_->value.size(); }

    const Mat& value() const { return node_->value; }
    Mat& mutable_value() { return node_->value; }

    bool has_grad() const { return node_->grad.size() != 0; }
    /// Gradient buffer; zeros if nothing has been accumulated yet.
    const Mat& grad() const { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.resize(0, 0); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }

    double item() const {
        if (size() != 1) throw ShapeMismatch("item: tensor is not a scalar");
        return node_->value(0, 0);
    }

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    Tensor(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

/// Wraps a computed value into a graph node. `fn` receives the output node and
/// must push gradients into parents that require them.
inline Tensor record(Mat value, std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (!grad_mode()) return Tensor(std::move(n));
    for (const auto& t : inputs) {
        if (t.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& t : inputs) n->parents.push_back(t.node());
        n->backward = std::move(fn);
    }
    return Tensor(std::move(n));
}

inline void require(bool ok, const char* what) {
    if (!ok) throw ShapeMismatch(what);
}

}  // namespace detail

/// Reverse pass from several outputs at once, each seeded with its own
/// upstream gradient. Gradients accumulate into leaves.
inline void backward(const std::vector<std::pair<Tensor, Mat>>& seeds) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack;
    for (const auto& [t, g] : seeds) {
        detail::require(t.rows() == g.rows() && t.cols() == g.cols(), "backward: seed shape mismatch");
        Node* root = t.node().get();
        if (!root->requires_grad || seen.count(root)) continue;
        seen.insert(root);
        stack.emplace_back(root, 0);
        while (!stack.empty()) {
            auto& [n, i] = stack.back();
            if (i < n->parents.size()) {
                Node* p = n->parents[i++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }
    for (const auto& [t, g] : seeds) {
        if (t.requires_grad()) t.node()->grad_buffer() += g;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
    // Release intermediate gradients; leaves keep theirs.
    for (Node* n : order) {
        if (n->backward) n->grad.resize(0, 0);
    }
}

inline void backward(const Tensor& out, const Mat& seed) { backward({{out, seed}}); }

// ---------------------------------------------------------------- operations

/// y = x W^T (+ b). x: [N, in], W: [out, in], b: [1, out] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
    detail::require(x.cols() == w.cols(), "linear: input width does not match weight");
    if (b.defined()) detail::require(b.rows() == 1 && b.cols() == w.rows(), "linear: bias shape");
    Mat y = x.value() * w.value().transpose();
    if (b.defined()) y.rowwise() += b.value().row(0);
    std::vector<Tensor> in{x, w};
    if (b.defined()) in.push_back(b);
    const bool has_bias = b.defined();
    return detail::record(std::move(y), std::move(in), [has_bias](Node& o) {
        Node& xn = *o.parents[0];
        Node& wn = *o.parents[1];
        if (xn.requires_grad) xn.grad_buffer().noalias() += o.grad * wn.value;
        if (wn.requires_grad) wn.grad_buffer().noalias() += o.grad.transpose() * xn.value;
        if (has_bias && o.parents[2]->requires_grad) o.parents[2]->grad_buffer() += o.grad.colwise().sum();
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return detail::record(a.value() + b.value(), {a, b}, [](Node& o) {
        for (auto& p : o.parents) {
            if (p->requires_grad) p->grad_buffer() += o.grad;
        }
    });
}

/// Adds a [T, D] table to every consecutive block of T rows of x.
inline Tensor add_tiled(const Tensor& x, const Tensor& table) {
    const Eigen::Index t = table.rows();
    detail::require(x.cols() == table.cols() && t > 0 && x.rows() % t == 0, "add_tiled: shape mismatch");
    Mat y = x.value();
    for (Eigen::Index r = 0; r < y.rows(); r += t) y.middleRows(r, t) += table.value();
    return detail::record(std::move(y), {x, table}, [t](Node& o) {
        if (o.parents[0]->requires_grad) o.parents[0]->grad_buffer() += o.grad;
        if (o.parents[1]->requires_grad) {
            Mat& g = o.parents[1]->grad_buffer();
            for (Eigen::Index r = 0; r < o.grad.rows(); r += t) g += o.grad.middleRows(r, t);
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::record(x.value() * s, {x}, [s](Node& o) { o.parents[0]->grad_buffer() += s * o.grad; });
}

inline Tensor relu(const Tensor& x) {
    return detail::record(x.value().cwiseMax(0.0), {x}, [](Node& o) {
        Node& xn = *o.parents[0];
        xn.grad_buffer() += (xn.value.array() > 0.0).select(o.grad, 0.0);
    });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    const Mat& v = x.value();
    Mat y = v.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); });
    return detail::record(std::move(y), {x}, [](Node& o) {
        Node& xn = *o.parents[0];
        const double c = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Mat d = xn.value.unaryExpr([c](double z) {
            return 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2)) + z * c * std::exp(-0.5 * z * z);
        });
        xn.grad_buffer() += d.cwiseProduct(o.grad);
    });
}

/// Per-row layer normalization with affine gain/shift of shape [1, D].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-6) {
    const Eigen::Index d = x.cols();
    detail::require(gain.rows() == 1 && gain.cols() == d && shift.rows() == 1 && shift.cols() == d,
                    "layer_norm: affine shape");
    Mat xhat(x.rows(), d);
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const auto row = x.value().row(r);
        const double mean = row.mean();
        const double var = (row.array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (row.array() - mean) * inv_std(r);
    }
    Mat y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
    y.rowwise() += shift.value().row(0);
    return detail::record(std::move(y), {x, gain, shift},
                          [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
                              Node& xn = *o.parents[0];
                              Node& gn = *o.parents[1];
                              Node& bn = *o.parents[2];
                              if (gn.requires_grad) gn.grad_buffer() += o.grad.cwiseProduct(xhat).colwise().sum();
                              if (bn.requires_grad) bn.grad_buffer() += o.grad.colwise().sum();
                              if (!xn.requires_grad) return;
                              const double n = static_cast<double>(xhat.cols());
                              Mat dxhat = (o.grad.array().rowwise() * gn.value.row(0).array()).matrix();
                              Mat& g = xn.grad_buffer();
                              for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                                  const double m1 = dxhat.row(r).mean();
                                  const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                                  g.row(r).array() +=
                                      inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                              }
                          });
}

/// Multi-head scaled dot-product self-attention. q, k, v: [B*T, D] with the
/// tokens of each sample in consecutive rows; heads split D evenly.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Eigen::Index tokens, Eigen::Index heads) {
    const Eigen::Index d = q.cols();
    detail::require(k.cols() == d && v.cols() == d && k.rows() == q.rows() && v.rows() == q.rows(),
                    "attention: q/k/v shapes differ");
    detail::require(tokens > 0 && q.rows() % tokens == 0, "attention: rows not a multiple of tokens");
    detail::require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
    const Eigen::Index dh = d / heads;
    const Eigen::Index batch = q.rows() / tokens;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat out(q.rows(), d);
    std::vector<Mat> probs(static_cast<std::size_t>(batch * heads));
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
            const auto qb = q.value().block(b * tokens, h * dh, tokens, dh);
            const auto kb = k.value().block(b * tokens, h * dh, tokens, dh);
            const auto vb = v.value().block(b * tokens, h * dh, tokens, dh);
            Mat s = (qb * kb.transpose()) * inv_scale;
            for (Eigen::Index r = 0; r < tokens; ++r) {
                const double mx = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - mx).exp();
                s.row(r) /= s.row(r).sum();
            }
            out.block(b * tokens, h * dh, tokens, dh).noalias() = s * vb;
            probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
        }
    }
    return detail::record(
        std::move(out), {q, k, v},
        [probs = std::move(probs), tokens, heads, dh, batch, inv_scale](Node& o) {
            Node& qn = *o.parents[0];
            Node& kn = *o.parents[1];
            Node& vn = *o.parents[2];
            for (Eigen::Index b = 0; b < batch; ++b) {
                for (Eigen::Index h = 0; h < heads; ++h) {
                    const Mat& p = probs[static_cast<std::size_t>(b * heads + h)];
                    const auto go = o.grad.block(b * tokens, h * dh, tokens, dh);
                    const auto qb = qn.value.block(b * tokens, h * dh, tokens, dh);
                    const auto kb = kn.value.block(b * tokens, h * dh, tokens, dh);
                    const auto vb = vn.value.block(b * tokens, h * dh, tokens, dh);
                    if (vn.requires_grad) vn.grad_buffer().block(b * tokens, h * dh, tokens, dh).noalias() += p.transpose() * go;
                    if (!qn.requires_grad && !kn.requires_grad) continue;
                    Mat dp = go * vb.transpose();
                    const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
                    Mat ds = p.cwiseProduct((dp.colwise() - row_dot)) * inv_scale;
                    if (qn.requires_grad) qn.grad_buffer().block(b * tokens, h * dh, tokens, dh).noalias() += ds * kb;
                    if (kn.requires_grad) kn.grad_buffer().block(b * tokens, h * dh, tokens, dh).noalias() += ds.transpose() * qb;
                }
            }
        });
}

/// Averages each consecutive block of `tokens` rows: [B*T, D] -> [B, D].
inline Tensor mean_pool(const Tensor& x, Eigen::Index tokens) {
    detail::require(tokens > 0 && x.rows() % tokens == 0, "mean_pool: rows not a multiple of tokens");
    const Eigen::Index batch = x.rows() / tokens;
    Mat y(batch, x.cols());
    for (Eigen::Index b = 0; b < batch; ++b) y.row(b) = x.value().middleRows(b * tokens, tokens).colwise().mean();
    return detail::record(std::move(y), {x}, [tokens](Node& o) {
        Mat& g = o.parents[0]->grad_buffer();
        const double w = 1.0 / static_cast<double>(tokens);
        for (Eigen::Index b = 0; b < o.grad.rows(); ++b) {
            g.middleRows(b * tokens, tokens).rowwise() += w * o.grad.row(b);
        }
    });
}

}  // namespace oucovit::nn
