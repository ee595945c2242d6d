#pragma once

// Bi-channel vision transformer. One frozen pre-norm trunk is shared by both
// eyes; LoRA factors on the attention projections are shared too, while each
// eye routes through its own adapter set. Heads are shared unless configured
// per eye.
//
// Adapter positions:
//   at_ffn           x + MLP(LN(x)) + s*ad(LN(x))          (parallel, every block)
//   before_ffn       h = LN(x); h += s*ad(h); x + MLP(h)   (serial, every block)
//   after_embedding  tokens += s*ad(tokens), once after the positional add
//   before_fc        pooled += s*ad(pooled), once before the heads

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oucovit/digest.hpp"
#include "oucovit/errors.hpp"
#include "oucovit/nn/layers.hpp"
#include "oucovit/nn/tensor.hpp"
#include "oucovit/random.hpp"

namespace oucovit::nn {

enum class AdapterPosition { at_ffn, after_embedding, before_ffn, before_fc };
enum class HeadSharing { shared, per_eye };

inline std::string to_string(AdapterPosition p) {
    switch (p) {
        case AdapterPosition::at_ffn: return "at_ffn";
        case AdapterPosition::after_embedding: return "after_embedding";
        case AdapterPosition::before_ffn: return "before_ffn";
        case AdapterPosition::before_fc: return "before_fc";
    }
    return "?";
}

inline AdapterPosition adapter_position_from(const std::string& s) {
    if (s == "at_ffn") return AdapterPosition::at_ffn;
    if (s == "after_embedding") return AdapterPosition::after_embedding;
    if (s == "before_ffn") return AdapterPosition::before_ffn;
    if (s == "before_fc") return AdapterPosition::before_fc;
    throw ValidationError("adapter_position", "unknown value '" + s + "'");
}

inline const std::set<std::string>& lora_target_names() {
    static const std::set<std::string> names{"query", "key", "value", "output"};
    return names;
}

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 1;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int lora_rank = 4;
    double lora_alpha = 0.0;  // 0 means "same as rank"
    std::vector<std::string> lora_targets{"query", "value"};
    int adapter_dim = 1;
    double adapter_scale = 0.1;
    AdapterPosition adapter_position = AdapterPosition::at_ffn;
    bool adapters_enabled = true;
    HeadSharing head_sharing = HeadSharing::shared;

    double alpha() const { return lora_alpha > 0.0 ? lora_alpha : static_cast<double>(lora_rank); }
    int tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
    int patch_features() const { return channels * patch_size * patch_size; }
    bool targets(const std::string& name) const {
        return std::find(lora_targets.begin(), lora_targets.end(), name) != lora_targets.end();
    }

    void validate() const {
        if (image_size < 1) throw ValidationError("image_size", "must be positive");
        if (patch_size < 1 || image_size % patch_size != 0) {
            throw ValidationError("patch_size", "must divide image_size");
        }
        if (channels != 1 && channels != 3) throw ValidationError("channels", "must be 1 or 3");
        if (embed_dim < 1) throw ValidationError("embed_dim", "must be positive");
        if (depth < 1) throw ValidationError("depth", "must be positive");
        if (heads < 1 || embed_dim % heads != 0) throw ValidationError("heads", "must divide embed_dim");
        if (mlp_ratio < 1) throw ValidationError("mlp_ratio", "must be positive");
        if (lora_rank < 1) throw ValidationError("lora_rank", "must be >= 1");
        if (lora_alpha < 0.0) throw ValidationError("lora_alpha", "must be non-negative");
        for (const auto& t : lora_targets) {
            if (!lora_target_names().count(t)) throw ValidationError("lora_targets", "unknown target '" + t + "'");
        }
        if (adapter_dim < 1) throw ValidationError("adapter_dim", "must be >= 1");
        if (!(adapter_scale > 0.0 && adapter_scale <= 1.0)) throw ValidationError("adapter_scale", "must lie in (0, 1]");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size},
            {"patch_size", c.patch_size},
            {"channels", c.channels},
            {"embed_dim", c.embed_dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.alpha()},
            {"lora_targets", c.lora_targets},
            {"adapter_dim", c.adapter_dim},
            {"adapter_scale", c.adapter_scale},
            {"adapter_position", to_string(c.adapter_position)},
            {"adapters_enabled", c.adapters_enabled},
            {"head_sharing", c.head_sharing == HeadSharing::shared ? "shared" : "per_eye"}};
}

/// Reads the fields present in `j` over the defaults in `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception&) {
            throw ValidationError(key, "wrong type");
        }
    };
    get("image_size", base.image_size);
    get("patch_size", base.patch_size);
    get("channels", base.channels);
    get("embed_dim", base.embed_dim);
    get("depth", base.depth);
    get("heads", base.heads);
    get("mlp_ratio", base.mlp_ratio);
    get("lora_rank", base.lora_rank);
    get("lora_alpha", base.lora_alpha);
    get("lora_targets", base.lora_targets);
    get("adapter_dim", base.adapter_dim);
    get("adapter_scale", base.adapter_scale);
    get("adapters_enabled", base.adapters_enabled);
    std::string s;
    if (j.contains("adapter_position")) {
        get("adapter_position", s);
        base.adapter_position = adapter_position_from(s);
    }
    if (j.contains("head_sharing")) {
        get("head_sharing", s);
        if (s == "shared") base.head_sharing = HeadSharing::shared;
        else if (s == "per_eye") base.head_sharing = HeadSharing::per_eye;
        else throw ValidationError("head_sharing", "unknown value '" + s + "'");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        static const std::set<std::string> known{"image_size", "patch_size", "channels", "embed_dim", "depth",
                                                 "heads", "mlp_ratio", "lora_rank", "lora_alpha", "lora_targets",
                                                 "adapter_dim", "adapter_scale", "adapter_position",
                                                 "adapters_enabled", "head_sharing"};
        if (!known.count(it.key())) throw ValidationError(it.key(), "unknown model field");
    }
    base.validate();
    return base;
}

/// Channel-major image, pixels[c][y][x] flattened.
struct Image {
    int channels = 1;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    double at(int c, int y, int x) const {
        return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

/// Stacks non-overlapping patches of each image as rows: [B*T, C*P*P].
inline Mat patchify(std::span<const Image* const> images, const ModelConfig& cfg) {
    const int p = cfg.patch_size;
    const int grid = cfg.image_size / p;
    const int t = cfg.tokens();
    Mat out(static_cast<Eigen::Index>(images.size()) * t, cfg.patch_features());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Image& im = *images[i];
        if (im.channels != cfg.channels || im.height != cfg.image_size || im.width != cfg.image_size ||
            im.pixels.size() != static_cast<std::size_t>(im.channels) * im.height * im.width) {
            throw ShapeMismatch("patchify: image does not match the configured size");
        }
        for (int gy = 0; gy < grid; ++gy) {
            for (int gx = 0; gx < grid; ++gx) {
                const Eigen::Index row = static_cast<Eigen::Index>(i) * t + gy * grid + gx;
                Eigen::Index col = 0;
                for (int c = 0; c < im.channels; ++c)
                    for (int y = 0; y < p; ++y)
                        for (int x = 0; x < p; ++x) out(row, col++) = im.at(c, gy * p + y, gx * p + x);
            }
        }
    }
    return out;
}

struct NamedParameter {
    std::string name;
    std::string group;  // trunk, lora, adapter_os, adapter_od, heads
    Tensor tensor;
    bool trainable = false;
};

struct ParameterReport {
    std::size_t n_total = 0;
    std::size_t n_trainable = 0;
    std::map<std::string, std::size_t> per_group;

    double trainable_fraction() const {
        return n_total == 0 ? 0.0 : static_cast<double>(n_trainable) / static_cast<double>(n_total);
    }
};

/// Regression mean and classification logit for a batch, each [B, 1].
struct HeadOutputs {
    Tensor mu;
    Tensor logit;
};

enum class ForwardPath { full, frozen_trunk };

class BiChannelModel {
public:
    BiChannelModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed, {0x6e6eULL});
        const Eigen::Index d = cfg_.embed_dim;
        const Eigen::Index hidden = d * cfg_.mlp_ratio;
        const Eigen::Index f = cfg_.patch_features();

        patch_ = LoraLinear::make(rng, f, d, 0, 0.0);
        pos_ = Tensor::leaf(normal_matrix(rng, cfg_.tokens(), d, 0.02), false);
        for (int i = 0; i < cfg_.depth; ++i) {
            Block b;
            b.ln1 = {ones(d), zeros(d)};
            b.ln2 = {ones(d), zeros(d)};
            auto proj = [&](const char* name) {
                return LoraLinear::make(rng, d, d, cfg_.targets(name) ? cfg_.lora_rank : 0, cfg_.alpha());
            };
            b.q = proj("query");
            b.k = proj("key");
            b.v = proj("value");
            b.o = proj("output");
            b.fc1 = LoraLinear::make(rng, d, hidden, 0, 0.0);
            b.fc2 = LoraLinear::make(rng, hidden, d, 0, 0.0);
            blocks_.push_back(std::move(b));
        }
        final_ln_ = {ones(d), zeros(d)};

        if (cfg_.adapters_enabled) {
            const bool per_block =
                cfg_.adapter_position == AdapterPosition::at_ffn || cfg_.adapter_position == AdapterPosition::before_ffn;
            const int count = per_block ? cfg_.depth : 1;
            for (int i = 0; i < count; ++i) {
                for (Eye e : {Eye::os, Eye::od}) {
                    adapters_[static_cast<int>(e)].push_back(
                        EyeAdapter::make(rng, d, cfg_.adapter_dim, cfg_.adapter_scale, e));
                }
            }
        }
        const int n_heads = cfg_.head_sharing == HeadSharing::shared ? 1 : 2;
        const double head_sd = 0.1 / std::sqrt(static_cast<double>(d));
        for (int h = 0; h < n_heads; ++h) {
            heads_.push_back({Tensor::leaf(normal_matrix(rng, 1, d, head_sd), true), Tensor::leaf(Mat::Zero(1, 1), true),
                              Tensor::leaf(normal_matrix(rng, 1, d, head_sd), true), Tensor::leaf(Mat::Zero(1, 1), true)});
        }
        register_parameters();
    }

    // Parameters hold graph nodes; copying would alias them.
    BiChannelModel(const BiChannelModel&) = delete;
    BiChannelModel& operator=(const BiChannelModel&) = delete;
    BiChannelModel(BiChannelModel&&) = default;
    BiChannelModel& operator=(BiChannelModel&&) = default;

    const ModelConfig& config() const { return cfg_; }

    /// Deterministic, ordered list of every parameter.
    const std::vector<NamedParameter>& parameters() const { return params_; }

    std::vector<Tensor> trainable_parameters() const {
        std::vector<Tensor> out;
        for (const auto& p : params_) {
            if (p.trainable) out.push_back(p.tensor);
        }
        return out;
    }

    const NamedParameter& parameter(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name == name) return p;
        }
        throw DomainError("unknown parameter '" + name + "'");
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Sets the regression-head bias (e.g. to the training-label mean).
    void set_regression_bias(double value) {
        for (auto& h : heads_) h.reg_b.mutable_value()(0, 0) = value;
    }

    void set_classification_bias(double value) {
        for (auto& h : heads_) h.cls_b.mutable_value()(0, 0) = value;
    }

    /// Forward over patchified images [B*T, F] routed through `eye`'s adapters.
    HeadOutputs forward(const Mat& patches, Eye eye, ForwardPath path = ForwardPath::full) const {
        const Eigen::Index t = cfg_.tokens();
        if (patches.cols() != cfg_.patch_features() || patches.rows() % t != 0 || patches.rows() == 0) {
            throw ShapeMismatch("forward: patch matrix does not match the configured model");
        }
        const bool full = path == ForwardPath::full;
        const auto& ads = adapters_[static_cast<int>(eye)];
        const bool use_ad = full && !ads.empty();
        const auto pos = cfg_.adapter_position;

        Tensor x = add_tiled(patch_.forward(Tensor::constant(patches), false), pos_);
        if (use_ad && pos == AdapterPosition::after_embedding) x = add(x, ads[0].branch(x));

        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const Block& b = blocks_[i];
            Tensor h = layer_norm(x, b.ln1.gain, b.ln1.shift);
            Tensor a = attention(b.q.forward(h, full), b.k.forward(h, full), b.v.forward(h, full), t, cfg_.heads);
            x = add(x, b.o.forward(a, full));

            Tensor h2 = layer_norm(x, b.ln2.gain, b.ln2.shift);
            if (use_ad && pos == AdapterPosition::before_ffn) h2 = add(h2, ads[i].branch(h2));
            x = add(x, b.fc2.forward(gelu(b.fc1.forward(h2, false)), false));
            if (use_ad && pos == AdapterPosition::at_ffn) x = add(x, ads[i].branch(h2));
        }
        Tensor pooled = mean_pool(layer_norm(x, final_ln_.gain, final_ln_.shift), t);
        if (use_ad && pos == AdapterPosition::before_fc) pooled = add(pooled, ads[0].branch(pooled));

        const Head& head = heads_[cfg_.head_sharing == HeadSharing::shared ? 0 : static_cast<int>(eye)];
        return {linear(pooled, head.reg_w, head.reg_b), linear(pooled, head.cls_w, head.cls_b)};
    }

    HeadOutputs forward(std::span<const Image* const> images, Eye eye, ForwardPath path = ForwardPath::full) const {
        return forward(patchify(images, cfg_), eye, path);
    }

    /// SHA-256 over names, shapes and values of every frozen parameter.
    std::string frozen_checksum() const {
        Sha256 h;
        for (const auto& p : params_) {
            if (p.trainable) continue;
            h.update(p.name);
            const std::int64_t shape[2] = {p.tensor.rows(), p.tensor.cols()};
            h.update_values(std::span<const std::int64_t>(shape, 2));
            h.update_values(std::span<const double>(p.tensor.value().data(), p.tensor.value().size()));
        }
        return h.hex();
    }

private:
    struct Norm {
        Tensor gain, shift;
    };
    struct Block {
        Norm ln1, ln2;
        LoraLinear q, k, v, o, fc1, fc2;
    };
    struct Head {
        Tensor reg_w, reg_b, cls_w, cls_b;
    };

    static Tensor ones(Eigen::Index d) { return Tensor::leaf(Mat::Ones(1, d), false); }
    static Tensor zeros(Eigen::Index d) { return Tensor::leaf(Mat::Zero(1, d), false); }

    void add_param(std::string name, std::string group, const Tensor& t) {
        params_.push_back({std::move(name), std::move(group), t, t.requires_grad()});
    }

    void add_linear(const std::string& name, const LoraLinear& l) {
        add_param(name + ".w", "trunk", l.w);
        add_param(name + ".b", "trunk", l.b);
        if (l.has_lora()) {
            add_param(name + ".lora_a", "lora", l.a);
            add_param(name + ".lora_b", "lora", l.bb);
        }
    }

    void register_parameters() {
        add_linear("patch", patch_);
        add_param("pos", "trunk", pos_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "block" + std::to_string(i) + ".";
            const Block& b = blocks_[i];
            add_param(p + "ln1.gain", "trunk", b.ln1.gain);
            add_param(p + "ln1.shift", "trunk", b.ln1.shift);
            add_linear(p + "query", b.q);
            add_linear(p + "key", b.k);
            add_linear(p + "value", b.v);
            add_linear(p + "output", b.o);
            add_param(p + "ln2.gain", "trunk", b.ln2.gain);
            add_param(p + "ln2.shift", "trunk", b.ln2.shift);
            add_linear(p + "fc1", b.fc1);
            add_linear(p + "fc2", b.fc2);
        }
        add_param("final_ln.gain", "trunk", final_ln_.gain);
        add_param("final_ln.shift", "trunk", final_ln_.shift);
        for (Eye e : {Eye::os, Eye::od}) {
            const auto& ads = adapters_[static_cast<int>(e)];
            for (std::size_t i = 0; i < ads.size(); ++i) {
                const std::string p = std::string("adapter.") + eye_name(e) + "." + std::to_string(i);
                const std::string g = std::string("adapter_") + eye_name(e);
                add_param(p + ".down", g, ads[i].down);
                add_param(p + ".up", g, ads[i].up);
            }
        }
        for (std::size_t h = 0; h < heads_.size(); ++h) {
            const std::string p =
                heads_.size() == 1 ? std::string("head.") : std::string("head.") + eye_name(static_cast<Eye>(h)) + ".";
            add_param(p + "reg.w", "heads", heads_[h].reg_w);
            add_param(p + "reg.b", "heads", heads_[h].reg_b);
            add_param(p + "cls.w", "heads", heads_[h].cls_w);
            add_param(p + "cls.b", "heads", heads_[h].cls_b);
        }
    }

    ModelConfig cfg_;
    LoraLinear patch_;
    Tensor pos_;
    std::vector<Block> blocks_;
    Norm final_ln_;
    std::vector<EyeAdapter> adapters_[2];
    std::vector<Head> heads_;
    std::vector<NamedParameter> params_;
};

inline ParameterReport trainable_parameter_report(const BiChannelModel& model) {
    ParameterReport r;
    for (const auto& p : model.parameters()) {
        const auto n = static_cast<std::size_t>(p.tensor.size());
        r.n_total += n;
        if (p.trainable) r.n_trainable += n;
        r.per_group[p.group] += n;
    }
    return r;
}

/// Single-image inference: (regression mean, classification logit).
inline std::pair<double, double> forward_eye(const BiChannelModel& model, const Image& image, Eye eye) {
    const Image* one[] = {&image};
    const auto out = model.forward(std::span<const Image* const>(one, 1), eye);
    return {out.mu.item(), out.logit.item()};
}

}  // namespace oucovit::nn
