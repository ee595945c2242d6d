#pragma once

// Three-module training procedure, evaluation metrics and cross-validation.
//
//   Module 1 (warm-up)     trains the trainable set under the empirical loss
//   Module 2 (estimation)  fits sigma and Gamma on training-split predictions
//   Module 3 (copula)      continues training under the copula loss with the
//                          Module-2 parameters frozen
//
// In empirical mode Module 3 keeps the empirical loss for the same number of
// epochs, so both modes see identical optimisation budgets.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oucovit/copula.hpp"
#include "oucovit/digest.hpp"
#include "oucovit/errors.hpp"
#include "oucovit/nn.hpp"
#include "oucovit/random.hpp"
#include "oucovit/synthdata.hpp"

namespace oucovit::pipeline {

using copula::CopulaParams;
using copula::LabelVector;
using copula::MarginalPrediction;
using synthdata::Dataset;

enum class LossMode { empirical, copula };

inline std::string to_string(LossMode m) { return m == LossMode::empirical ? "empirical" : "copula"; }

inline LossMode loss_mode_from(const std::string& s) {
    if (s == "empirical") return LossMode::empirical;
    if (s == "copula") return LossMode::copula;
    throw ValidationError("loss_mode", "expected 'empirical' or 'copula', got '" + s + "'");
}

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

struct ExperimentConfig {
    nn::ModelConfig model;
    synthdata::SynthConfig data;
    std::string data_path;  // when set, the dataset is read instead of generated
    int epochs_warmup = 20;
    int epochs_copula = 15;
    int batch_size = 32;
    double lr = 1e-4;
    int lr_drop_epoch = 10;
    double lr_after = 1e-5;
    LossMode loss_mode = LossMode::copula;
    int folds = 5;
    int run_folds = 0;  // 0 means all folds
    SplitFractions split;
    double regression_weight = 1.0;
    double classification_weight = 1.0;
    bool reestimate_copula = false;
    std::uint64_t seed = 0;

    int folds_to_run() const { return run_folds > 0 ? std::min(run_folds, folds) : folds; }

    void validate() const {
        model.validate();
        if (data_path.empty()) data.validate();
        if (model.image_size != data.image_size && data_path.empty()) {
            throw ValidationError("model.image_size", "must equal data.image_size");
        }
        if (model.channels != data.channels && data_path.empty()) {
            throw ValidationError("model.channels", "must equal data.channels");
        }
        if (epochs_warmup < 1) throw ValidationError("epochs_warmup", "must be >= 1");
        if (epochs_copula < 1) throw ValidationError("epochs_copula", "must be >= 1");
        if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
        if (!(lr > 0.0)) throw ValidationError("lr", "must be positive");
        if (!(lr_after > 0.0)) throw ValidationError("lr_after", "must be positive");
        if (lr_drop_epoch < 0) throw ValidationError("lr_drop_epoch", "must be >= 0");
        if (folds < 3) throw ValidationError("folds", "must be >= 3");
        if (run_folds < 0) throw ValidationError("run_folds", "must be >= 0");
        if (!(regression_weight >= 0.0)) throw ValidationError("regression_weight", "must be >= 0");
        if (!(classification_weight >= 0.0)) throw ValidationError("classification_weight", "must be >= 0");
        const double sum = split.train + split.val + split.test;
        if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split", "fractions must sum to 1");
        // Fold k tests on group k and validates on group k+1.
        const double unit = 1.0 / folds;
        if (std::abs(split.test - unit) > 1e-9 || std::abs(split.val - unit) > 1e-9) {
            throw ValidationError("split", "val and test fractions must each equal 1/folds");
        }
    }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j{{"model", nn::to_json(c.model)},
                     {"epochs_warmup", c.epochs_warmup},
                     {"epochs_copula", c.epochs_copula},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_drop_epoch", c.lr_drop_epoch},
                     {"lr_after", c.lr_after},
                     {"loss_mode", to_string(c.loss_mode)},
                     {"folds", c.folds},
                     {"run_folds", c.run_folds},
                     {"split", {c.split.train, c.split.val, c.split.test}},
                     {"regression_weight", c.regression_weight},
                     {"classification_weight", c.classification_weight},
                     {"reestimate_copula", c.reestimate_copula},
                     {"seed", c.seed}};
    if (c.data_path.empty()) {
        j["data"] = synthdata::to_json(c.data);
    } else {
        j["data_path"] = c.data_path;
    }
    return j;
}

/// Reads the fields present in `j` over `base`. Unknown keys and wrong types
/// raise ValidationError naming the field.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
    if (!j.is_object()) throw ValidationError("config", "must be a JSON object");
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception&) {
            throw ValidationError(key, "wrong type");
        }
    };
    static const char* known[] = {"model", "data", "data_path", "epochs_warmup", "epochs_copula", "batch_size",
                                  "lr", "lr_drop_epoch", "lr_after", "loss_mode", "folds", "run_folds", "split",
                                  "regression_weight", "classification_weight", "reestimate_copula", "seed",
                                  "$schema"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; })) {
            throw ValidationError(it.key(), "unknown config field");
        }
    }
    if (j.contains("model")) base.model = nn::model_config_from_json(j.at("model"), base.model);
    if (j.contains("data")) base.data = synthdata::synth_config_from_json(j.at("data"), base.data);
    get("data_path", base.data_path);
    get("epochs_warmup", base.epochs_warmup);
    get("epochs_copula", base.epochs_copula);
    get("batch_size", base.batch_size);
    get("lr", base.lr);
    get("lr_drop_epoch", base.lr_drop_epoch);
    get("lr_after", base.lr_after);
    if (j.contains("loss_mode")) {
        std::string s;
        get("loss_mode", s);
        base.loss_mode = loss_mode_from(s);
    }
    get("folds", base.folds);
    get("run_folds", base.run_folds);
    if (j.contains("split")) {
        std::vector<double> s;
        get("split", s);
        if (s.size() != 3) throw ValidationError("split", "expected [train, val, test]");
        base.split = {s[0], s[1], s[2]};
    } else if (j.contains("folds")) {
        const double unit = 1.0 / base.folds;
        base.split = {1.0 - 2.0 * unit, unit, unit};
    }
    get("regression_weight", base.regression_weight);
    get("classification_weight", base.classification_weight);
    get("reestimate_copula", base.reestimate_copula);
    get("seed", base.seed);
    return base;
}

inline std::string config_digest(const ExperimentConfig& c) { return short_digest(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Splits

struct FoldSplit {
    std::vector<std::size_t> train, val, test;
};

/// Patient-level assignment: a seeded permutation dealt round-robin into
/// `folds` groups. Both eyes of a patient always share a group.
inline std::vector<std::vector<std::size_t>> assign_folds(std::size_t n_patients, int folds, std::uint64_t seed) {
    if (folds < 1) throw ValidationError("folds", "must be positive");
    if (n_patients < static_cast<std::size_t>(folds)) throw ValidationError("folds", "more folds than patients");
    std::vector<std::size_t> order(n_patients);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed, {0xf01dULL});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(folds));
    for (std::size_t i = 0; i < order.size(); ++i) groups[i % groups.size()].push_back(order[i]);
    for (auto& g : groups) std::sort(g.begin(), g.end());
    return groups;
}

/// Fold k: test = group k, validation = group k+1 (mod folds), train = rest.
inline FoldSplit fold_split(const std::vector<std::vector<std::size_t>>& groups, int fold) {
    const int folds = static_cast<int>(groups.size());
    if (fold < 0 || fold >= folds) throw ValidationError("fold", "out of range");
    FoldSplit s;
    s.test = groups[static_cast<std::size_t>(fold)];
    s.val = groups[static_cast<std::size_t>((fold + 1) % folds)];
    for (int g = 0; g < folds; ++g) {
        if (g == fold || g == (fold + 1) % folds) continue;
        s.train.insert(s.train.end(), groups[static_cast<std::size_t>(g)].begin(),
                       groups[static_cast<std::size_t>(g)].end());
    }
    std::sort(s.train.begin(), s.train.end());
    return s;
}

/// Shuffled patient batches; every batch carries both eyes of its patients.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> patients, int batch_size, Rng& rng) {
    rng.shuffle(patients);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < patients.size(); i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(patients.size(), i + static_cast<std::size_t>(batch_size));
        out.emplace_back(patients.begin() + static_cast<std::ptrdiff_t>(i),
                         patients.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Per-patient empirical loss w_r[(y1-mu1)^2 + (y2-mu2)^2] + w_c[BCE3 + BCE4],
/// summed over the batch, with exact partials.
inline copula::LossResult empirical_loss(std::span<const LabelVector> labels, std::span<const MarginalPrediction> preds,
                                         double w_reg = 1.0, double w_cls = 1.0) {
    if (labels.empty() || labels.size() != preds.size()) throw DomainError("empirical_loss: bad batch");
    copula::LossResult r;
    r.grads.resize(labels.size());
    auto bce = [](double logit, int y) {
        // log(1 + exp(-|l|)) + max(l, 0) - y l, stable for any logit.
        return std::log1p(std::exp(-std::abs(logit))) + std::max(logit, 0.0) - y * logit;
    };
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& l = labels[i];
        const auto& p = preds[i];
        copula::check_label(l);
        const double e1 = p.mu1 - l.y1;
        const double e2 = p.mu2 - l.y2;
        r.loss += w_reg * (e1 * e1 + e2 * e2) + w_cls * (bce(p.logit3, l.y3) + bce(p.logit4, l.y4));
        r.grads[i] = {2.0 * w_reg * e1, 2.0 * w_reg * e2, w_cls * (copula::sigmoid(p.logit3) - l.y3),
                      w_cls * (copula::sigmoid(p.logit4) - l.y4)};
    }
    return r;
}

// ---------------------------------------------------------------------------
// Metrics

/// Rank-based AUC with midranks for ties. Empty when one class is absent.
inline std::optional<double> auc_midrank(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DomainError("auc: size mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
        i = j + 1;
    }
    double pos = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == 1) {
            pos += 1.0;
            rank_sum += rank[i];
        }
    }
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0) return std::nullopt;
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

inline double mean_bce(std::span<const double> logits, std::span<const int> labels) {
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double p = numcore::clamp_prob(copula::sigmoid(logits[i]));
        s -= labels[i] == 1 ? std::log(p) : std::log1p(-p);
    }
    return s / static_cast<double>(logits.size());
}

inline double mean_squared_error(std::span<const double> pred, std::span<const double> truth) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return s / static_cast<double>(pred.size());
}

struct MetricsRecord {
    int fold = -1;
    std::string loss_mode;
    bool adapters = true;
    int rank = 0;
    double auc_hm_os = 0, auc_hm_od = 0, auc_hm_ou = 0;
    double ce_hm_os = 0, ce_hm_od = 0, ce_hm_ou = 0;
    double mse_al_os = 0, mse_al_od = 0, mse_al_ou = 0;
    bool auc_defined = true;  // false when a split holds a single class
    long floor_events = 0;
    std::string config_digest;
};

/// Names and accessors of the numeric metric columns, in CSV order.
inline const std::vector<std::pair<std::string, double MetricsRecord::*>>& metric_fields() {
    static const std::vector<std::pair<std::string, double MetricsRecord::*>> f{
        {"auc_hm_os", &MetricsRecord::auc_hm_os}, {"auc_hm_od", &MetricsRecord::auc_hm_od},
        {"auc_hm_ou", &MetricsRecord::auc_hm_ou}, {"ce_hm_os", &MetricsRecord::ce_hm_os},
        {"ce_hm_od", &MetricsRecord::ce_hm_od},   {"ce_hm_ou", &MetricsRecord::ce_hm_ou},
        {"mse_al_os", &MetricsRecord::mse_al_os}, {"mse_al_od", &MetricsRecord::mse_al_od},
        {"mse_al_ou", &MetricsRecord::mse_al_ou}};
    return f;
}

struct Predictions {
    std::vector<std::size_t> patients;
    std::vector<MarginalPrediction> preds;
    std::vector<LabelVector> labels;
};

inline Predictions predict(const nn::BiChannelModel& model, const Dataset& data, std::span<const std::size_t> patients,
                           int batch = 256) {
    nn::NoGradGuard no_grad;
    Predictions out;
    out.patients.assign(patients.begin(), patients.end());
    for (std::size_t i = 0; i < patients.size(); i += static_cast<std::size_t>(batch)) {
        const auto end = std::min(patients.size(), i + static_cast<std::size_t>(batch));
        std::vector<const nn::Image*> os, od;
        for (std::size_t k = i; k < end; ++k) {
            os.push_back(&data.patients[patients[k]].image_os);
            od.push_back(&data.patients[patients[k]].image_od);
        }
        const auto a = model.forward(os, nn::Eye::os);
        const auto b = model.forward(od, nn::Eye::od);
        for (std::size_t k = i; k < end; ++k) {
            const auto r = static_cast<Eigen::Index>(k - i);
            out.preds.push_back({a.mu.value()(r, 0), b.mu.value()(r, 0), a.logit.value()(r, 0), b.logit.value()(r, 0)});
            out.labels.push_back(data.patients[patients[k]].labels);
        }
    }
    return out;
}

inline MetricsRecord metrics_from(const Predictions& p) {
    if (p.preds.empty()) throw DomainError("evaluate: empty split");
    const std::size_t n = p.preds.size();
    std::vector<double> mu1(n), mu2(n), l3(n), l4(n), y1(n), y2(n);
    std::vector<int> y3(n), y4(n);
    for (std::size_t i = 0; i < n; ++i) {
        mu1[i] = p.preds[i].mu1;
        mu2[i] = p.preds[i].mu2;
        l3[i] = p.preds[i].logit3;
        l4[i] = p.preds[i].logit4;
        y1[i] = p.labels[i].y1;
        y2[i] = p.labels[i].y2;
        y3[i] = p.labels[i].y3;
        y4[i] = p.labels[i].y4;
    }
    MetricsRecord m;
    const auto a3 = auc_midrank(l3, y3);
    const auto a4 = auc_midrank(l4, y4);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.auc_defined = a3.has_value() && a4.has_value();
    m.auc_hm_os = a3.value_or(nan);
    m.auc_hm_od = a4.value_or(nan);
    m.auc_hm_ou = 0.5 * (m.auc_hm_os + m.auc_hm_od);
    m.ce_hm_os = mean_bce(l3, y3);
    m.ce_hm_od = mean_bce(l4, y4);
    m.ce_hm_ou = 0.5 * (m.ce_hm_os + m.ce_hm_od);
    m.mse_al_os = mean_squared_error(mu1, y1);
    m.mse_al_od = mean_squared_error(mu2, y2);
    m.mse_al_ou = 0.5 * (m.mse_al_os + m.mse_al_od);
    return m;
}

inline MetricsRecord evaluate(const nn::BiChannelModel& model, const Dataset& data,
                              std::span<const std::size_t> patients) {
    return metrics_from(predict(model, data, patients));
}

// ---------------------------------------------------------------------------
// Modules

/// Receives one JSON record per epoch (and per module boundary).
using LogSink = std::function<void(const nlohmann::json&)>;

struct TrainingContext {
    const ExperimentConfig& cfg;
    const Dataset& data;
    const FoldSplit& split;
    int fold = 0;
    LogSink log;
};

struct WarmupResult {
    nn::BiChannelModel model;
    Predictions train_predictions;
    std::string frozen_checksum;
};

namespace detail {

struct EpochStats {
    double loss = 0.0;  // mean per patient
    long floor_events = 0;
    double grad_norm_ratio = 0.0;  // regression / classification output-gradient norm
};

/// One pass over the training split. `loss_fn` maps a batch to summed loss and
/// per-patient output gradients; the step uses the batch mean.
inline EpochStats train_epoch(nn::BiChannelModel& model, nn::Adam& opt, const TrainingContext& ctx, double lr,
                              Rng& rng,
                              const std::function<copula::LossResult(std::span<const LabelVector>,
                                                                     std::span<const MarginalPrediction>)>& loss_fn) {
    EpochStats st;
    double reg_sq = 0.0;
    double cls_sq = 0.0;
    for (const auto& batch : make_batches(ctx.split.train, ctx.cfg.batch_size, rng)) {
        std::vector<const nn::Image*> os, od;
        std::vector<LabelVector> labels;
        for (auto p : batch) {
            os.push_back(&ctx.data.patients[p].image_os);
            od.push_back(&ctx.data.patients[p].image_od);
            labels.push_back(ctx.data.patients[p].labels);
        }
        opt.zero_grad();
        const auto a = model.forward(os, nn::Eye::os);
        const auto b = model.forward(od, nn::Eye::od);
        const auto n = static_cast<Eigen::Index>(batch.size());
        std::vector<MarginalPrediction> preds(batch.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            preds[static_cast<std::size_t>(i)] = {a.mu.value()(i, 0), b.mu.value()(i, 0), a.logit.value()(i, 0),
                                                  b.logit.value()(i, 0)};
        }
        const auto r = loss_fn(labels, preds);
        if (!std::isfinite(r.loss)) {
            nlohmann::json dump = nlohmann::json::array();
            for (std::size_t i = 0; i < preds.size(); ++i) {
                dump.push_back({batch[i], preds[i].mu1, preds[i].mu2, preds[i].logit3, preds[i].logit4});
            }
            throw NonFiniteLoss("non-finite loss in fold " + std::to_string(ctx.fold) +
                                "; batch [patient, mu1, mu2, logit3, logit4]: " + dump.dump());
        }
        nn::Mat g_mu_os(n, 1), g_mu_od(n, 1), g_lg_os(n, 1), g_lg_od(n, 1);
        const double inv = 1.0 / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& g = r.grads[static_cast<std::size_t>(i)];
            g_mu_os(i, 0) = g.d_mu1 * inv;
            g_mu_od(i, 0) = g.d_mu2 * inv;
            g_lg_os(i, 0) = g.d_logit3 * inv;
            g_lg_od(i, 0) = g.d_logit4 * inv;
        }
        reg_sq += g_mu_os.squaredNorm() + g_mu_od.squaredNorm();
        cls_sq += g_lg_os.squaredNorm() + g_lg_od.squaredNorm();
        nn::backward({{a.mu, g_mu_os}, {a.logit, g_lg_os}, {b.mu, g_mu_od}, {b.logit, g_lg_od}});
        opt.step(lr);
        st.loss += r.loss;
        st.floor_events += static_cast<long>(r.floor_events);
    }
    st.loss /= static_cast<double>(ctx.split.train.size());
    st.grad_norm_ratio = cls_sq > 0.0 ? std::sqrt(reg_sq / cls_sq) : std::numeric_limits<double>::infinity();
    return st;
}

inline double learning_rate(const ExperimentConfig& cfg, int epoch) {
    return epoch < cfg.lr_drop_epoch ? cfg.lr : cfg.lr_after;
}

inline nlohmann::json metrics_json(const MetricsRecord& m) {
    nlohmann::json j;
    for (const auto& [name, field] : metric_fields()) {
        const double v = m.*field;
        j[name] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    }
    return j;
}

inline void emit(const TrainingContext& ctx, nlohmann::json rec) {
    if (!ctx.log) return;
    rec["fold"] = ctx.fold;
    ctx.log(rec);
}

}  // namespace detail

/// Module 1. Trains the trainable set under the empirical loss.
inline WarmupResult run_warmup(const TrainingContext& ctx) {
    const auto& cfg = ctx.cfg;
    cfg.validate();
    if (ctx.split.train.empty()) throw DomainError("run_warmup: empty training split");
    nn::BiChannelModel model(cfg.model, cfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(ctx.fold + 1)));

    // Start the heads at the training-label means.
    double al = 0.0;
    double hm = 0.0;
    for (auto p : ctx.split.train) {
        const auto& l = ctx.data.patients[p].labels;
        al += 0.5 * (l.y1 + l.y2);
        hm += 0.5 * (l.y3 + l.y4);
    }
    const double n = static_cast<double>(ctx.split.train.size());
    model.set_regression_bias(al / n);
    const double rate = std::clamp(hm / n, 1e-3, 1 - 1e-3);
    model.set_classification_bias(synthdata::logit(rate));

    const std::string checksum = model.frozen_checksum();
    nn::Adam opt(model.trainable_parameters());
    auto loss = [&](std::span<const LabelVector> l, std::span<const MarginalPrediction> p) {
        return empirical_loss(l, p, cfg.regression_weight, cfg.classification_weight);
    };
    {
        const auto p0 = predict(model, ctx.data, ctx.split.train);
        detail::emit(ctx, {{"module", "warmup_start"}, {"step0_loss", loss(p0.labels, p0.preds).loss / n}});
    }
    for (int e = 0; e < cfg.epochs_warmup; ++e) {
        Rng rng(cfg.seed, {static_cast<std::uint64_t>(ctx.fold), 1, static_cast<std::uint64_t>(e)});
        const double lr = detail::learning_rate(cfg, e);
        const auto st = detail::train_epoch(model, opt, ctx, lr, rng, loss);
        detail::emit(ctx, {{"module", "warmup"},
                           {"epoch", e},
                           {"lr", lr},
                           {"train_loss", st.loss},
                           {"floor_events", 0},
                           {"grad_norm_ratio", st.grad_norm_ratio},
                           {"val", detail::metrics_json(evaluate(model, ctx.data, ctx.split.val))}});
    }
    if (model.frozen_checksum() != checksum) throw Error("freeze contract violated during warm-up");
    auto preds = predict(model, ctx.data, ctx.split.train);
    return {std::move(model), std::move(preds), checksum};
}

/// Module 2. Sigma from residual standard deviations; Gamma from Pearson
/// correlations of the standardized residuals and of the fitted-probability
/// Gaussian scores, projected to a valid correlation matrix.
inline CopulaParams run_copula_estimation(std::span<const MarginalPrediction> preds, std::span<const LabelVector> labels,
                                          copula::ParamsMeta meta = {}) {
    if (preds.size() != labels.size()) throw DomainError("run_copula_estimation: size mismatch");
    const std::size_t n = preds.size();
    std::vector<double> r1(n), r2(n), s3(n), s4(n);
    for (std::size_t i = 0; i < n; ++i) {
        r1[i] = labels[i].y1 - preds[i].mu1;
        r2[i] = labels[i].y2 - preds[i].mu2;
        s3[i] = copula::binary_threshold(preds[i].logit3);
        s4[i] = copula::binary_threshold(preds[i].logit4);
    }
    CopulaParams p;
    try {
        std::tie(p.sigma1, p.sigma2) = copula::estimate_sigmas(r1, r2);
        std::vector<double> z1(n), z2(n);
        for (std::size_t i = 0; i < n; ++i) {
            z1[i] = r1[i] / p.sigma1;
            z2[i] = r2[i] / p.sigma2;
        }
        p.gamma = copula::estimate_gamma(z1, z2, s3, s4);
    } catch (const DegenerateInput& e) {
        throw DegenerateInput(std::string(e.what()) + " (copula estimation, run '" + meta.source_run + "', fold " +
                              std::to_string(meta.fold) + ")");
    }
    meta.sample_count = n;
    p.meta = std::move(meta);
    return p;
}

/// Module 3. Requires parameters produced by Module 2 on the training split.
inline nn::BiChannelModel run_copula_training(const TrainingContext& ctx, nn::BiChannelModel model,
                                              CopulaParams params, long* floor_events = nullptr) {
    const auto& cfg = ctx.cfg;
    if (cfg.loss_mode == LossMode::copula) {
        params.validate();
        if (params.meta.sample_count == 0 || params.meta.split != "train") {
            throw DomainError("copula training requires parameters estimated on the training split (Module 2)");
        }
    }
    const std::string checksum = model.frozen_checksum();
    nn::Adam opt(model.trainable_parameters());
    long floors = 0;
    for (int e = 0; e < cfg.epochs_copula; ++e) {
        if (cfg.loss_mode == LossMode::copula && cfg.reestimate_copula && e > 0) {
            const auto p = predict(model, ctx.data, ctx.split.train);
            params = run_copula_estimation(p.preds, p.labels, params.meta);
        }
        auto loss = [&](std::span<const LabelVector> l, std::span<const MarginalPrediction> p) {
            if (cfg.loss_mode == LossMode::copula) return copula::copula_loss(l, p, params);
            return empirical_loss(l, p, cfg.regression_weight, cfg.classification_weight);
        };
        Rng rng(cfg.seed, {static_cast<std::uint64_t>(ctx.fold), 3, static_cast<std::uint64_t>(e)});
        const double lr = detail::learning_rate(cfg, e);
        const auto st = detail::train_epoch(model, opt, ctx, lr, rng, loss);
        floors += st.floor_events;
        detail::emit(ctx, {{"module", cfg.loss_mode == LossMode::copula ? "copula" : "empirical"},
                           {"epoch", e},
                           {"lr", lr},
                           {"train_loss", st.loss},
                           {"floor_events", st.floor_events},
                           {"grad_norm_ratio", st.grad_norm_ratio},
                           {"val", detail::metrics_json(evaluate(model, ctx.data, ctx.split.val))}});
    }
    if (model.frozen_checksum() != checksum) throw Error("freeze contract violated during Module 3");
    if (floor_events) *floor_events = floors;
    return model;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldArtifacts {
    CopulaParams params;  // meaningful in copula mode only
    bool has_params = false;
    std::string warmup_checksum;
};

struct CrossvalResult {
    std::vector<MetricsRecord> records;
    nlohmann::json summary;
};

inline std::string format_number(double v) {
    if (!std::isfinite(v)) return "NA";
    return synthdata::detail::exact(v);
}

inline std::string metrics_csv_header() {
    std::string h = "fold,loss_mode,adapters,rank";
    for (const auto& [name, _] : metric_fields()) h += "," + name;
    return h + ",auc_defined,floor_events,config_digest\n";
}

inline std::string metrics_csv_row(const MetricsRecord& m) {
    std::string r = std::to_string(m.fold) + "," + m.loss_mode + "," + (m.adapters ? "on" : "off") + "," +
                    std::to_string(m.rank);
    for (const auto& [_, field] : metric_fields()) r += "," + format_number(m.*field);
    return r + "," + (m.auc_defined ? "1" : "0") + "," + std::to_string(m.floor_events) + "," + m.config_digest + "\n";
}

/// Mean and sample standard deviation per metric and loss mode. Undefined
/// values (NA) are skipped.
inline nlohmann::json summarize(const std::vector<MetricsRecord>& records) {
    nlohmann::json modes = nlohmann::json::object();
    std::vector<std::string> names;
    for (const auto& r : records) {
        if (std::find(names.begin(), names.end(), r.loss_mode) == names.end()) names.push_back(r.loss_mode);
    }
    for (const auto& mode : names) {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [name, field] : metric_fields()) {
            std::vector<double> v;
            for (const auto& r : records) {
                if (r.loss_mode == mode && std::isfinite(r.*field)) v.push_back(r.*field);
            }
            if (v.empty()) {
                m[name] = {{"mean", nullptr}, {"std", nullptr}, {"n", 0}};
                continue;
            }
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
            m[name] = {{"mean", mean}, {"std", sd}, {"n", v.size()}};
        }
        long floors = 0;
        for (const auto& r : records) {
            if (r.loss_mode == mode) floors += r.floor_events;
        }
        m["floor_events"] = floors;
        modes[mode] = m;
    }
    return modes;
}

/// All three modules on one fold, scored on its test split. `cfg.loss_mode`
/// selects the Module-3 loss. Artifacts go to `fold_dir` when it is non-empty.
inline MetricsRecord run_fold(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& split, int fold,
                              const LogSink& sink, const std::filesystem::path& fold_dir = {}) {
    const std::string digest = config_digest(cfg);
    const TrainingContext ctx{cfg, data, split, fold, sink};
    auto warm = run_warmup(ctx);
    CopulaParams params;
    if (cfg.loss_mode == LossMode::copula) {
        copula::ParamsMeta meta;
        meta.source_run = digest + "/fold" + std::to_string(fold);
        meta.fold = fold;
        meta.config_digest = digest;
        params = run_copula_estimation(warm.train_predictions.preds, warm.train_predictions.labels, meta);
        detail::emit(ctx, {{"module", "estimation"}, {"copula_params", copula::to_json(params)}});
    }
    if (!fold_dir.empty()) {
        std::filesystem::create_directories(fold_dir);
        nn::save_checkpoint(warm.model, fold_dir / "warmup.ckpt");
        if (cfg.loss_mode == LossMode::copula) {
            synthdata::detail::write_file(fold_dir / "copula_params.json", copula::to_json(params).dump(2) + "\n");
        }
    }
    long floors = 0;
    auto model = run_copula_training(ctx, std::move(warm.model), params, &floors);
    if (!fold_dir.empty()) nn::save_checkpoint(model, fold_dir / "final.ckpt");

    MetricsRecord m = evaluate(model, data, split.test);
    m.fold = fold;
    m.loss_mode = to_string(cfg.loss_mode);
    m.adapters = cfg.model.adapters_enabled;
    m.rank = cfg.model.lora_rank;
    m.floor_events = floors;
    m.config_digest = digest;
    detail::emit(ctx, {{"module", "test"}, {"test", detail::metrics_json(m)}});
    return m;
}

/// Runs the three modules per fold for each requested loss mode. Folds are
/// independent tasks; up to `jobs` run concurrently. Each task buffers its log
/// so outputs do not depend on scheduling. When `out_dir` is non-empty, all
/// artifacts are written into a temporary sibling renamed into place at the end.
inline CrossvalResult run_crossval(const ExperimentConfig& cfg, const Dataset& data,
                                   std::vector<LossMode> modes = {}, const std::filesystem::path& out_dir = {},
                                   const LogSink& progress = {}, int jobs = 1) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (jobs < 1) throw ValidationError("jobs", "must be >= 1");
    if (modes.empty()) modes = {cfg.loss_mode};
    if (data.config.image_size != cfg.model.image_size || data.config.channels != cfg.model.channels) {
        throw ValidationError("model.image_size", "dataset images do not match the model configuration");
    }
    const auto groups = assign_folds(data.size(), cfg.folds, cfg.seed);

    fs::path tmp;
    if (!out_dir.empty()) {
        tmp = fs::absolute(out_dir).string() + ".partial";
        fs::remove_all(tmp);
        fs::create_directories(tmp);
    }

    struct Task {
        LossMode mode;
        int fold;
        MetricsRecord record;
        std::string log;
        std::exception_ptr error;
    };
    std::vector<Task> tasks;
    for (LossMode mode : modes) {
        for (int fold = 0; fold < cfg.folds_to_run(); ++fold) tasks.push_back({mode, fold, {}, {}, nullptr});
    }
    std::mutex progress_mutex;

    auto run_task = [&](Task& task) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.loss_mode = task.mode;
        const std::string digest = config_digest(run_cfg);
        const int fold = task.fold;
        const FoldSplit split = fold_split(groups, fold);
        LogSink sink = [&](const nlohmann::json& rec) {
            nlohmann::json r = rec;
            r["loss_mode"] = to_string(task.mode);
            r["config_digest"] = digest;
            task.log += r.dump() + "\n";
            if (progress) {
                std::lock_guard lock(progress_mutex);
                progress(r);
            }
        };
        try {
            const fs::path fold_dir =
                tmp.empty() ? fs::path{} : tmp / (to_string(task.mode) + "_fold" + std::to_string(fold));
            task.record = run_fold(run_cfg, data, split, fold, sink, fold_dir);
        } catch (const ValidationError&) {
            task.error = std::current_exception();
        } catch (const Error& e) {
            task.error = std::make_exception_ptr(
                Error("fold " + std::to_string(fold) + " (" + to_string(task.mode) + "): " + e.what()));
        } catch (...) {
            task.error = std::current_exception();
        }
    };

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) run_task(tasks[i]);
    };
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), tasks.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }

    CrossvalResult result;
    try {
        for (const auto& t : tasks) {
            if (t.error) std::rethrow_exception(t.error);
            result.records.push_back(t.record);
        }
        result.summary = {{"config_digest", config_digest(cfg)},
                          {"dataset_digest", data.digest},
                          {"seed", cfg.seed},
                          {"folds_run", cfg.folds_to_run()},
                          {"adapters", cfg.model.adapters_enabled},
                          {"lora_rank", cfg.model.lora_rank},
                          {"adapter_position", nn::to_string(cfg.model.adapter_position)},
                          {"config", to_json(cfg)},
                          {"modes", summarize(result.records)}};
        if (!tmp.empty()) {
            std::string csv = metrics_csv_header();
            std::string log;
            for (const auto& t : tasks) log += t.log;
            for (const auto& r : result.records) csv += metrics_csv_row(r);
            synthdata::detail::write_file(tmp / "log.jsonl", log);
            synthdata::detail::write_file(tmp / "metrics.csv", csv);
            synthdata::detail::write_file(tmp / "summary.json", result.summary.dump(2) + "\n");
            const fs::path target = fs::absolute(out_dir);
            fs::remove_all(target);
            fs::rename(tmp, target);
        }
    } catch (...) {
        if (!tmp.empty()) {
            std::error_code ec;
            fs::remove_all(tmp, ec);
        }
        throw;
    }
    return result;
}

inline Dataset load_or_generate(const ExperimentConfig& cfg) {
    if (!cfg.data_path.empty()) return synthdata::read_dataset(cfg.data_path);
    return synthdata::generate_dataset(cfg.data);
}

}  // namespace oucovit::pipeline
