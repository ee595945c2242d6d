#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "oucovit/oracle.hpp"
#include "oucovit/pipeline.hpp"

using namespace oucovit;
using namespace oucovit::pipeline;

namespace {

ExperimentConfig toy_config() {
    ExperimentConfig c;
    c.data.n_patients = 60;
    c.data.image_size = 16;
    c.data.seed = 3;
    c.model.image_size = 16;
    c.model.patch_size = 8;
    c.model.embed_dim = 16;
    c.model.depth = 1;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    c.epochs_warmup = 2;
    c.epochs_copula = 2;
    c.batch_size = 16;
    c.lr = 1e-3;
    c.lr_after = 1e-3;
    c.folds = 5;
    c.run_folds = 1;
    c.seed = 11;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Auc, MidrankEdgeCases) {
    const std::vector<double> s{0.1, 0.2, 0.3, 0.4};
    EXPECT_DOUBLE_EQ(*auc_midrank(s, std::vector<int>{0, 0, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(*auc_midrank(s, std::vector<int>{1, 1, 0, 0}), 0.0);
    const std::vector<double> flat(10, 0.5);
    EXPECT_DOUBLE_EQ(*auc_midrank(flat, std::vector<int>{0, 1, 0, 1, 0, 1, 0, 1, 0, 1}), 0.5);
    EXPECT_FALSE(auc_midrank(s, std::vector<int>{1, 1, 1, 1}).has_value());

    Rng rng(5);
    std::vector<double> r(20000);
    std::vector<int> y(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        r[i] = rng.normal();
        y[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    const double a = *auc_midrank(r, y);
    EXPECT_GT(a, 0.45);
    EXPECT_LT(a, 0.55);
}

TEST(Auc, TiesAcrossClassesCountHalf) {
    // One positive tied with one negative: pairs (p, n) = 1 win, 0.5 tie -> 0.75.
    EXPECT_DOUBLE_EQ(*auc_midrank(std::vector<double>{0.0, 1.0, 1.0}, std::vector<int>{0, 0, 1}), 0.75);
}

TEST(Folds, PartitionIsExactAndPatientLevel) {
    const auto groups = assign_folds(103, 5, 9);
    std::set<std::size_t> seen;
    for (const auto& g : groups) {
        EXPECT_GE(g.size(), 20u);
        for (auto p : g) EXPECT_TRUE(seen.insert(p).second);
    }
    EXPECT_EQ(seen.size(), 103u);
    std::set<std::size_t> tested;
    for (int k = 0; k < 5; ++k) {
        const auto s = fold_split(groups, k);
        EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 103u);
        std::set<std::size_t> all(s.train.begin(), s.train.end());
        for (auto p : s.val) EXPECT_TRUE(all.insert(p).second);
        for (auto p : s.test) EXPECT_TRUE(all.insert(p).second);
        tested.insert(s.test.begin(), s.test.end());
    }
    EXPECT_EQ(tested.size(), 103u);
    EXPECT_EQ(assign_folds(103, 5, 9), groups);
    EXPECT_NE(assign_folds(103, 5, 10), groups);
}

TEST(Folds, BatchesKeepEveryPatientOnce) {
    std::vector<std::size_t> ids(37);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(1);
    const auto batches = make_batches(ids, 8, rng);
    EXPECT_EQ(batches.size(), 5u);
    std::set<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    EXPECT_EQ(seen.size(), 37u);
}

TEST(EmpiricalLoss, GradientsMatchFiniteDifferences) {
    const std::vector<LabelVector> l{{24.3, 23.9, 1, 0}};
    const std::vector<MarginalPrediction> p{{24.0, 24.1, 0.3, -0.7}};
    const auto r = empirical_loss(l, p, 1.0, 2.0);
    const double h = 1e-6;
    auto loss_at = [&](int k, double d) {
        auto q = p;
        double* f[] = {&q[0].mu1, &q[0].mu2, &q[0].logit3, &q[0].logit4};
        *f[k] += d;
        return empirical_loss(l, q, 1.0, 2.0).loss;
    };
    const double g[] = {r.grads[0].d_mu1, r.grads[0].d_mu2, r.grads[0].d_logit3, r.grads[0].d_logit4};
    for (int k = 0; k < 4; ++k) {
        EXPECT_NEAR((loss_at(k, h) - loss_at(k, -h)) / (2 * h), g[k], 1e-6) << k;
    }
    EXPECT_TRUE(std::isfinite(empirical_loss(l, std::vector<MarginalPrediction>{{24, 24, 800, -800}}).loss));
}

TEST(CopulaWiring, IdentityCorrelationSeparatesIntoMarginals) {
    // With Gamma = I the joint log density is a sum of per-target terms, so the
    // copula loss differs from the sum of Gaussian and Bernoulli NLLs only by
    // the constants the loss drops (log 2 pi and log sigma, fixed in Module 3).
    copula::CopulaParams params;
    params.sigma1 = 0.7;
    params.sigma2 = 1.3;
    params.meta.sample_count = 1;
    Rng rng(12);
    std::vector<LabelVector> labels;
    std::vector<MarginalPrediction> preds;
    for (int i = 0; i < 50; ++i) {
        preds.push_back({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
        labels.push_back({rng.normal(), rng.normal(), rng.uniform() < 0.5, rng.uniform() < 0.5});
    }
    const auto c = copula::copula_loss(labels, preds, params);
    double ref = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& l = labels[i];
        const auto& p = preds[i];
        ref += 0.5 * std::pow((l.y1 - p.mu1) / params.sigma1, 2);
        ref += 0.5 * std::pow((l.y2 - p.mu2) / params.sigma2, 2);
        const double p3 = copula::sigmoid(p.logit3);
        const double p4 = copula::sigmoid(p.logit4);
        ref -= l.y3 ? std::log(p3) : std::log1p(-p3);
        ref -= l.y4 ? std::log(p4) : std::log1p(-p4);
    }
    EXPECT_NEAR(c.loss, ref, 1e-6 * std::abs(ref));
}

TEST(CopulaEstimation, RecoversIdentityAndSigmas) {
    // Independent targets around known marginals.
    Rng rng(21);
    std::vector<LabelVector> labels;
    std::vector<MarginalPrediction> preds;
    for (int i = 0; i < 20000; ++i) {
        const MarginalPrediction p{24 + rng.normal(), 24 + rng.normal(), rng.normal(), rng.normal()};
        labels.push_back({p.mu1 + 0.5 * rng.normal(), p.mu2 + 0.8 * rng.normal(),
                          rng.uniform() < copula::sigmoid(p.logit3), rng.uniform() < copula::sigmoid(p.logit4)});
        preds.push_back(p);
    }
    copula::ParamsMeta meta;
    meta.fold = 2;
    const auto est = run_copula_estimation(preds, labels, meta);
    EXPECT_NEAR(est.sigma1, 0.5, 0.025);
    EXPECT_NEAR(est.sigma2, 0.8, 0.04);
    for (int a = 0; a < 4; ++a) {
        for (int b = a + 1; b < 4; ++b) EXPECT_LT(std::abs(est.gamma(a, b)), 0.05) << a << b;
    }
    EXPECT_EQ(est.meta.sample_count, 20000u);
    EXPECT_EQ(est.meta.split, "train");
    EXPECT_EQ(est.meta.fold, 2);
}

TEST(CopulaEstimation, CrossBlockFromHardLabelsIsNearZero) {
    // The binary scores are deterministic functions of the fitted logits, so
    // their correlation with the continuous residuals vanishes when the
    // predictions are unbiased, even if the latent cross correlation is large.
    synthdata::SynthConfig cfg;
    cfg.n_patients = 8000;
    cfg.true_gamma = copula::CorrelationMatrix4::from_entries(0.5, 0.5, 0.5, 0.5, 0.5, 0.5);
    std::vector<LabelVector> labels;
    std::vector<MarginalPrediction> preds;
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        const auto s = synthdata::generate_patient(cfg, i, false);
        labels.push_back(s.labels);
        preds.push_back(s.latent.truth);
    }
    const auto est = run_copula_estimation(preds, labels);
    EXPECT_NEAR(est.gamma(0, 1), 0.5, 0.05);
    EXPECT_LT(std::abs(est.gamma(0, 2)), 0.1);
    EXPECT_LT(std::abs(est.gamma(1, 3)), 0.1);
}

TEST(Protocol, CopulaTrainingNeedsEstimatedParameters) {
    auto cfg = toy_config();
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto split = fold_split(assign_folds(data.size(), cfg.folds, cfg.seed), 0);
    const TrainingContext ctx{cfg, data, split, 0, {}};
    nn::BiChannelModel model(cfg.model, 1);
    EXPECT_THROW(run_copula_training(ctx, std::move(model), copula::CopulaParams{}), DomainError);
}

TEST(Protocol, WarmupPreservesFrozenWeightsAndReducesLoss) {
    auto cfg = toy_config();
    cfg.data.n_patients = 120;
    cfg.epochs_warmup = 4;
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto split = fold_split(assign_folds(data.size(), cfg.folds, cfg.seed), 0);
    std::vector<double> losses;
    const TrainingContext ctx{cfg, data, split, 0, [&](const nlohmann::json& r) {
                                  if (r.contains("train_loss")) losses.push_back(r["train_loss"]);
                              }};
    auto warm = run_warmup(ctx);
    EXPECT_EQ(warm.model.frozen_checksum(), warm.frozen_checksum);
    ASSERT_EQ(losses.size(), 4u);
    EXPECT_LT(losses.back(), losses.front());
    EXPECT_EQ(warm.train_predictions.preds.size(), split.train.size());
}

TEST(Protocol, NonFiniteLossIsReportedWithBatchContext) {
    auto cfg = toy_config();
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto split = fold_split(assign_folds(data.size(), cfg.folds, cfg.seed), 0);
    const TrainingContext ctx{cfg, data, split, 0, {}};
    nn::BiChannelModel model(cfg.model, 1);
    nn::Adam opt(model.trainable_parameters());
    Rng rng(1);
    auto bad = [](std::span<const LabelVector> l, std::span<const MarginalPrediction>) {
        copula::LossResult r;
        r.loss = std::numeric_limits<double>::quiet_NaN();
        r.grads.resize(l.size());
        return r;
    };
    try {
        detail::train_epoch(model, opt, ctx, 1e-3, rng, bad);
        FAIL();
    } catch (const NonFiniteLoss& e) {
        EXPECT_NE(std::string(e.what()).find("fold 0"), std::string::npos);
    }
}

TEST(Crossval, OutputsAreByteIdenticalAcrossRuns) {
    auto cfg = toy_config();
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto base = std::filesystem::temp_directory_path() / "oucovit_cv_det";
    std::filesystem::remove_all(base);
    const auto a = run_crossval(cfg, data, {LossMode::empirical, LossMode::copula}, base / "a");
    const auto b = run_crossval(cfg, data, {LossMode::empirical, LossMode::copula}, base / "b");
    ASSERT_EQ(a.records.size(), 2u);
    for (const char* f : {"metrics.csv", "summary.json", "log.jsonl"}) {
        EXPECT_EQ(slurp(base / "a" / f), slurp(base / "b" / f)) << f;
    }
    EXPECT_TRUE(std::filesystem::exists(base / "a" / "copula_fold0" / "copula_params.json"));
    EXPECT_TRUE(std::filesystem::exists(base / "a" / "empirical_fold0" / "final.ckpt"));
    EXPECT_FALSE(std::filesystem::exists(base / "a.partial"));
    const auto csv = slurp(base / "a" / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n') + 1), metrics_csv_header());
    EXPECT_EQ(a.summary["dataset_digest"], data.digest);
    std::filesystem::remove_all(base);
}

TEST(Crossval, SummaryUsesSampleStandardDeviation) {
    std::vector<MetricsRecord> recs(3);
    const double vals[] = {0.6, 0.7, 0.9};
    for (int i = 0; i < 3; ++i) {
        recs[i].loss_mode = "copula";
        recs[i].auc_hm_ou = vals[i];
    }
    recs[2].mse_al_os = std::numeric_limits<double>::quiet_NaN();
    const auto s = summarize(recs);
    const auto& m = s["copula"]["auc_hm_ou"];
    EXPECT_NEAR(m["mean"].get<double>(), 2.2 / 3, 1e-15);
    const double mean = 2.2 / 3;
    const double sd = std::sqrt(((0.6 - mean) * (0.6 - mean) + (0.7 - mean) * (0.7 - mean) +
                                 (0.9 - mean) * (0.9 - mean)) / 2);
    EXPECT_NEAR(m["std"].get<double>(), sd, 1e-15);
    EXPECT_EQ(s["copula"]["mse_al_os"]["n"], 2);
    EXPECT_EQ(format_number(std::numeric_limits<double>::quiet_NaN()), "NA");
}

TEST(ExperimentConfig, ValidationAndJsonRoundTrip) {
    auto cfg = toy_config();
    const auto back = experiment_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(back), to_json(cfg));
    EXPECT_EQ(config_digest(back), config_digest(cfg));
    try {
        experiment_config_from_json({{"batch_size", 0}}).validate();
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "batch_size");
    }
    EXPECT_THROW(experiment_config_from_json({{"epochs", 3}}), ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"loss_mode", "mse"}}), ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"split", {0.5, 0.3, 0.2}}}).validate(), ValidationError);
    EXPECT_NO_THROW(experiment_config_from_json({{"folds", 4}}, toy_config()).validate());
}

TEST(Crossval, ParallelFoldsMatchSequential) {
    auto cfg = toy_config();
    cfg.run_folds = 3;
    cfg.epochs_warmup = 1;
    cfg.epochs_copula = 1;
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto base = std::filesystem::temp_directory_path() / "oucovit_cv_jobs";
    std::filesystem::remove_all(base);
    run_crossval(cfg, data, {LossMode::copula}, base / "seq", {}, 1);
    run_crossval(cfg, data, {LossMode::copula}, base / "par", {}, 3);
    for (const char* f : {"metrics.csv", "summary.json", "log.jsonl"}) {
        EXPECT_EQ(slurp(base / "seq" / f), slurp(base / "par" / f)) << f;
    }
    std::filesystem::remove_all(base);
}

TEST(Crossval, FailedRunLeavesNoOutputDirectory) {
    auto cfg = toy_config();
    auto data = synthdata::generate_dataset(cfg.data);
    for (auto& p : data.patients) p.labels.y1 = std::numeric_limits<double>::infinity();
    const auto out = std::filesystem::temp_directory_path() / "oucovit_cv_fail";
    std::filesystem::remove_all(out);
    EXPECT_THROW(run_crossval(cfg, data, {LossMode::empirical}, out), Error);
    EXPECT_FALSE(std::filesystem::exists(out));
    EXPECT_FALSE(std::filesystem::exists(out.string() + ".partial"));
}

TEST(CopulaWiring, UnitSigmaIdentityGradientIsHalfRegressionPlusBce) {
    copula::CopulaParams params;
    params.meta.sample_count = 1;
    Rng rng(13);
    std::vector<LabelVector> labels;
    std::vector<MarginalPrediction> preds;
    for (int i = 0; i < 64; ++i) {
        preds.push_back({rng.normal(), rng.normal(), 2 * rng.normal(), 2 * rng.normal()});
        labels.push_back({rng.normal(), rng.normal(), rng.uniform() < 0.5, rng.uniform() < 0.5});
    }
    const auto c = copula::copula_loss(labels, preds, params);
    const auto e = empirical_loss(labels, preds);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        EXPECT_NEAR(c.grads[i].d_mu1, 0.5 * e.grads[i].d_mu1, 1e-10);
        EXPECT_NEAR(c.grads[i].d_mu2, 0.5 * e.grads[i].d_mu2, 1e-10);
        EXPECT_NEAR(c.grads[i].d_logit3, e.grads[i].d_logit3, 1e-10);
        EXPECT_NEAR(c.grads[i].d_logit4, e.grads[i].d_logit4, 1e-10);
    }
}

TEST(CopulaWiring, StepZeroLossIsNegativeSummedLogDensity) {
    auto cfg = toy_config();
    const auto data = synthdata::generate_dataset(cfg.data);
    const auto split = fold_split(assign_folds(data.size(), cfg.folds, cfg.seed), 0);
    const TrainingContext ctx{cfg, data, split, 0, {}};
    auto warm = run_warmup(ctx);
    copula::ParamsMeta meta;
    const auto params = run_copula_estimation(warm.train_predictions.preds, warm.train_predictions.labels, meta);
    const auto& p = warm.train_predictions;
    const auto loss = copula::copula_loss(p.labels, p.preds, params);
    double ref = 0.0;
    for (std::size_t i = 0; i < p.preds.size(); ++i) {
        ref -= copula::log_joint_density(p.labels[i], p.preds[i], params);
    }
    EXPECT_NEAR(loss.loss, ref, 1e-9 * std::abs(ref));
}

TEST(Protocol, OneWarmupEpochLowersTrainingLossOnDefaultData) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ExperimentConfig cfg;
        cfg.data.n_patients = 200;
        cfg.data.seed = seed;
        cfg.seed = seed;
        cfg.model.patch_size = 8;
        cfg.model.embed_dim = 32;
        cfg.model.depth = 2;
        cfg.model.heads = 2;
        cfg.epochs_warmup = 1;
        const auto data = synthdata::generate_dataset(cfg.data);
        const auto split = fold_split(assign_folds(data.size(), cfg.folds, cfg.seed), 0);
        double step0 = 0.0;
        const TrainingContext ctx{cfg, data, split, 0, [&](const nlohmann::json& r) {
                                      if (r["module"] == "warmup_start") step0 = r["step0_loss"];
                                  }};
        const auto warm = run_warmup(ctx);
        const auto& p = warm.train_predictions;
        const double after = empirical_loss(p.labels, p.preds).loss / static_cast<double>(p.preds.size());
        ASSERT_GT(step0, 0.0);
        EXPECT_LT(after, step0) << "seed " << seed;
    }
}
