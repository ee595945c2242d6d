#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "oucovit/synthdata.hpp"

using namespace oucovit;
using namespace oucovit::synthdata;

namespace {

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::filesystem::path scratch(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST(GeneratePatient, DeterministicPerIndex) {
    SynthConfig cfg;
    cfg.seed = 42;
    const auto a = generate_patient(cfg, 17);
    const auto b = generate_patient(cfg, 17);
    EXPECT_TRUE(same_bits(a.image_os.pixels, b.image_os.pixels));
    EXPECT_TRUE(same_bits(a.image_od.pixels, b.image_od.pixels));
    EXPECT_EQ(std::memcmp(&a.labels, &b.labels, sizeof a.labels), 0);
    const auto c = generate_patient(cfg, 18);
    EXPECT_FALSE(same_bits(a.image_os.pixels, c.image_os.pixels));
    EXPECT_THROW(generate_patient(cfg, cfg.n_patients), DomainError);
}

TEST(GeneratePatient, ZeroAsymmetryGivesIdenticalEyeSignal) {
    SynthConfig cfg;
    cfg.asymmetry_strength = 0.0;
    cfg.noise_std = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        const auto s = generate_patient(cfg, i);
        EXPECT_EQ(s.latent.truth.mu1, s.latent.truth.mu2);
        EXPECT_EQ(s.latent.truth.logit3, s.latent.truth.logit4);
    }
    const auto s = generate_patient(cfg, 3);
    const double e = s.latent.u;
    EXPECT_EQ(blob_shape(cfg, e, s.latent.v_os), blob_shape(cfg, e, s.latent.v_od));
}

TEST(GeneratePatient, LabelMarginalsMatchTrueProbabilities) {
    SynthConfig cfg;
    cfg.n_patients = 10000;
    cfg.seed = 7;
    double hits = 0.0;
    double mean_p = 0.0;
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        const auto s = generate_patient(cfg, i, false);
        hits += s.labels.y3;
        mean_p += copula::sigmoid(s.latent.truth.logit3);
    }
    const double n = static_cast<double>(cfg.n_patients);
    mean_p /= n;
    const double se = std::sqrt(mean_p * (1 - mean_p) / n);
    EXPECT_LT(std::abs(hits / n - mean_p), 3 * se);
}

TEST(GeneratePatient, ContinuousScoresRecoverTrueCorrelation) {
    SynthConfig cfg;
    cfg.n_patients = 10000;
    cfg.seed = 8;
    std::vector<double> z1, z2;
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        const auto s = generate_patient(cfg, i, false);
        z1.push_back((s.labels.y1 - s.latent.truth.mu1) / cfg.true_sigma1);
        z2.push_back((s.labels.y2 - s.latent.truth.mu2) / cfg.true_sigma2);
    }
    EXPECT_NEAR(copula::pearson(z1, z2), cfg.true_gamma(0, 1), 0.05);
}

TEST(GeneratePatient, LinearProbeOnImageStatisticsIsLearnable) {
    SynthConfig cfg;
    cfg.n_patients = 1000;
    cfg.seed = 9;
    const auto d = generate_dataset(cfg);
    Eigen::MatrixXd x(cfg.n_patients, 4);
    Eigen::VectorXd y(cfg.n_patients);
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        const auto& px = d.patients[i].image_os.pixels;
        const Eigen::Map<const Eigen::VectorXd> v(px.data(), static_cast<Eigen::Index>(px.size()));
        const double mean = v.mean();
        x.row(static_cast<Eigen::Index>(i)) << 1.0, mean, v.maxCoeff(), (v.array() - mean).square().mean();
        y(static_cast<Eigen::Index>(i)) = d.patients[i].latent.truth.mu1;
    }
    const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
    const double ss_res = (y - x * beta).squaredNorm();
    const double ss_tot = (y.array() - y.mean()).square().sum();
    EXPECT_GE(1.0 - ss_res / ss_tot, 0.5);
}

TEST(Dataset, RoundTripIsBitwise) {
    SynthConfig cfg;
    cfg.n_patients = 25;
    cfg.image_size = 8;
    cfg.channels = 3;
    cfg.true_gamma = copula::CorrelationMatrix4::from_entries(0.123456789012345, 0.1, -0.2, 0.3, 0.05, 0.6);
    cfg.seed = 10;
    const auto d = generate_dataset(cfg);
    const auto path = scratch("oucovit_ds_roundtrip");
    EXPECT_EQ(write_dataset(d, path), d.digest);
    const auto back = read_dataset(path);
    EXPECT_EQ(back.digest, d.digest);
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_TRUE(same_bits(back.patients[i].image_os.pixels, d.patients[i].image_os.pixels));
        EXPECT_TRUE(same_bits(back.patients[i].image_od.pixels, d.patients[i].image_od.pixels));
        EXPECT_EQ(std::memcmp(&back.patients[i].labels, &d.patients[i].labels, sizeof(copula::LabelVector)), 0);
        EXPECT_EQ(back.patients[i].latent.truth.logit4, d.patients[i].latent.truth.logit4);
    }
    EXPECT_EQ(back.config.true_gamma.matrix(), cfg.true_gamma.matrix());
    EXPECT_EQ(to_json(back.config), to_json(cfg));
    std::filesystem::remove_all(path);
}

TEST(Dataset, TruncationAndBadMagicAreFormatErrors) {
    SynthConfig cfg;
    cfg.n_patients = 5;
    cfg.image_size = 8;
    const auto path = scratch("oucovit_ds_trunc");
    write_dataset(generate_dataset(cfg), path);
    const auto images = path / "images.bin";
    std::filesystem::resize_file(images, std::filesystem::file_size(images) - 8);
    EXPECT_THROW(read_dataset(path), FormatError);

    write_dataset(generate_dataset(cfg), path);
    {
        std::fstream f(images, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    EXPECT_THROW(read_dataset(path), FormatError);

    write_dataset(generate_dataset(cfg), path);
    std::filesystem::resize_file(path / "labels.csv", 60);
    EXPECT_THROW(read_dataset(path), FormatError);
    EXPECT_THROW(read_dataset(path / "nope"), IoError);
    std::filesystem::remove_all(path);
}

TEST(SynthConfig, ValidationNamesTheField) {
    try {
        synth_config_from_json({{"base_p3", 1.5}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "base_p3");
    }
    EXPECT_THROW(synth_config_from_json({{"asymmetry_strength", -1}}), ValidationError);
    EXPECT_THROW(synth_config_from_json({{"colour", 1}}), ValidationError);
    EXPECT_THROW(synth_config_from_json({{"true_gamma", {{1, 2}}}}), ValidationError);
}
