#pragma once

// Paired-eye synthetic patients. A shared severity factor u and per-eye
// perturbations v_os, v_od define each eye's severity e = u + a * v (a is the
// asymmetry strength). Severity sets the true regression mean and logit of
// that eye and is rendered into the image as a smooth radial blob whose
// amplitude and radius grow with e; the scaled eye perturbation a * v also
// stretches the blob (eccentricity). Labels are drawn from the declared Gaussian copula
// around the true marginals.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "oucovit/copula.hpp"
#include "oucovit/digest.hpp"
#include "oucovit/errors.hpp"
#include "oucovit/nn/model.hpp"
#include "oucovit/random.hpp"

namespace oucovit::synthdata {

using nn::Image;

struct SynthConfig {
    std::size_t n_patients = 2000;
    int image_size = 32;
    int channels = 1;
    double signal_strength = 1.0;
    double asymmetry_strength = 0.5;
    double noise_std = 0.1;
    copula::CorrelationMatrix4 true_gamma = copula::CorrelationMatrix4::from_entries(0.7, 0.4, 0.4, 0.4, 0.4, 0.7);
    double true_sigma1 = 0.5;
    double true_sigma2 = 0.5;
    double base_p3 = 0.3;
    double base_p4 = 0.3;
    double al_mean = 24.0;   // regression intercept
    double al_slope = 1.0;   // regression mean per unit severity
    double hm_slope = 1.5;   // logit per unit severity
    std::uint64_t seed = 0;

    void validate() const {
        if (n_patients < 1) throw ValidationError("n_patients", "must be >= 1");
        if (image_size < 4) throw ValidationError("image_size", "must be >= 4");
        if (channels != 1 && channels != 3) throw ValidationError("channels", "must be 1 or 3");
        if (!(signal_strength >= 0.0)) throw ValidationError("signal_strength", "must be >= 0");
        if (!(asymmetry_strength >= 0.0)) throw ValidationError("asymmetry_strength", "must be >= 0");
        if (!(noise_std >= 0.0)) throw ValidationError("noise_std", "must be >= 0");
        if (!(true_sigma1 > 0.0)) throw ValidationError("true_sigma1", "must be positive");
        if (!(true_sigma2 > 0.0)) throw ValidationError("true_sigma2", "must be positive");
        if (!(base_p3 > 0.0 && base_p3 < 1.0)) throw ValidationError("base_p3", "must lie in (0, 1)");
        if (!(base_p4 > 0.0 && base_p4 < 1.0)) throw ValidationError("base_p4", "must lie in (0, 1)");
    }

    copula::CopulaParams true_params() const {
        copula::CopulaParams p;
        p.gamma = true_gamma;
        p.sigma1 = true_sigma1;
        p.sigma2 = true_sigma2;
        p.meta.source_run = "ground-truth";
        return p;
    }
};

inline nlohmann::json to_json(const SynthConfig& c) {
    nlohmann::json g = nlohmann::json::array();
    for (int i = 0; i < 4; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < 4; ++j) row.push_back(c.true_gamma(i, j));
        g.push_back(row);
    }
    return {{"n_patients", c.n_patients},       {"image_size", c.image_size},
            {"channels", c.channels},           {"signal_strength", c.signal_strength},
            {"asymmetry_strength", c.asymmetry_strength}, {"noise_std", c.noise_std},
            {"true_gamma", g},                  {"true_sigma1", c.true_sigma1},
            {"true_sigma2", c.true_sigma2},     {"base_p3", c.base_p3},
            {"base_p4", c.base_p4},             {"al_mean", c.al_mean},
            {"al_slope", c.al_slope},           {"hm_slope", c.hm_slope},
            {"seed", c.seed}};
}

/// Reads the fields present in `j` over `base`; unknown keys are rejected.
inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {}) {
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception&) {
            throw ValidationError(key, "wrong type");
        }
    };
    get("n_patients", base.n_patients);
    get("image_size", base.image_size);
    get("channels", base.channels);
    get("signal_strength", base.signal_strength);
    get("asymmetry_strength", base.asymmetry_strength);
    get("noise_std", base.noise_std);
    get("true_sigma1", base.true_sigma1);
    get("true_sigma2", base.true_sigma2);
    get("base_p3", base.base_p3);
    get("base_p4", base.base_p4);
    get("al_mean", base.al_mean);
    get("al_slope", base.al_slope);
    get("hm_slope", base.hm_slope);
    get("seed", base.seed);
    if (j.contains("true_gamma")) {
        const auto& g = j.at("true_gamma");
        Eigen::Matrix4d m;
        if (!g.is_array() || g.size() != 4) throw ValidationError("true_gamma", "must be a 4x4 array");
        for (int r = 0; r < 4; ++r) {
            if (!g[r].is_array() || g[r].size() != 4) throw ValidationError("true_gamma", "must be a 4x4 array");
            for (int c = 0; c < 4; ++c) {
                if (!g[r][c].is_number()) throw ValidationError("true_gamma", "entries must be numbers");
                m(r, c) = g[r][c].get<double>();
            }
        }
        try {
            base.true_gamma = copula::CorrelationMatrix4::from_matrix(m);
        } catch (const DomainError& e) {
            throw ValidationError("true_gamma", e.what());
        }
    }
    static const char* known[] = {"n_patients", "image_size", "channels",   "signal_strength", "asymmetry_strength",
                                  "noise_std",  "true_gamma", "true_sigma1", "true_sigma2",    "base_p3",
                                  "base_p4",    "al_mean",    "al_slope",   "hm_slope",        "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; })) {
            throw ValidationError(it.key(), "unknown data field");
        }
    }
    base.validate();
    return base;
}

/// Hidden factors kept for diagnostics and oracle predictions.
struct LatentRecord {
    double u = 0.0;
    double v_os = 0.0;
    double v_od = 0.0;
    copula::MarginalPrediction truth;  // true g1..g4
};

struct PatientSample {
    Image image_os;
    Image image_od;
    copula::LabelVector labels;
    LatentRecord latent;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Deterministic blob geometry of one eye.
struct BlobShape {
    double amplitude = 0.0;
    double rx = 0.0;
    double ry = 0.0;

    bool operator==(const BlobShape&) const = default;
};

inline BlobShape blob_shape(const SynthConfig& cfg, double severity, double perturbation) {
    const double s = cfg.signal_strength;
    const double radius = 0.18 * cfg.image_size * std::exp(0.12 * s * std::tanh(severity));
    const double stretch = std::exp(0.25 * s * std::tanh(cfg.asymmetry_strength * perturbation));
    return {1.0 + 0.4 * s * severity, radius * stretch, radius / stretch};
}

namespace detail {

inline Image render_eye(const SynthConfig& cfg, double severity, double perturbation, Rng& rng) {
    const int n = cfg.image_size;
    const auto [amplitude, rx, ry] = blob_shape(cfg, severity, perturbation);
    const double cx = 0.5 * (n - 1) + rng.uniform(-1.5, 1.5);
    const double cy = 0.5 * (n - 1) + rng.uniform(-1.5, 1.5);
    static constexpr double gains[3] = {1.0, 0.8, 0.6};

    Image im{cfg.channels, n, n, std::vector<double>(static_cast<std::size_t>(cfg.channels) * n * n)};
    for (int c = 0; c < cfg.channels; ++c) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const double dx = (x - cx) / rx;
                const double dy = (y - cy) / ry;
                const double blob = gains[c] * amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
                im.pixels[(static_cast<std::size_t>(c) * n + y) * n + x] = blob + cfg.noise_std * rng.normal();
            }
        }
    }
    return im;
}

}  // namespace detail

/// True marginals of one patient from its latent factors.
inline copula::MarginalPrediction true_marginals(const SynthConfig& cfg, double u, double v_os, double v_od) {
    const double e_os = u + cfg.asymmetry_strength * v_os;
    const double e_od = u + cfg.asymmetry_strength * v_od;
    return {cfg.al_mean + cfg.al_slope * e_os, cfg.al_mean + cfg.al_slope * e_od,
            logit(cfg.base_p3) + cfg.hm_slope * e_os, logit(cfg.base_p4) + cfg.hm_slope * e_od};
}

/// Deterministic in (cfg.seed, index): every patient draws from its own
/// counter-keyed streams, so patients can be generated in any order.
inline PatientSample generate_patient(const SynthConfig& cfg, std::size_t index, bool render = true) {
    if (index >= cfg.n_patients) throw DomainError("generate_patient: index out of range");
    Rng factors(cfg.seed, {index, 0});
    PatientSample s;
    s.latent.u = factors.normal();
    s.latent.v_os = factors.normal();
    s.latent.v_od = factors.normal();
    s.latent.truth = true_marginals(cfg, s.latent.u, s.latent.v_os, s.latent.v_od);
    const auto& g = s.latent.truth;

    if (render) {
        const double e_os = s.latent.u + cfg.asymmetry_strength * s.latent.v_os;
        const double e_od = s.latent.u + cfg.asymmetry_strength * s.latent.v_od;
        Rng pixels_os(cfg.seed, {index, 1});
        Rng pixels_od(cfg.seed, {index, 2});
        s.image_os = detail::render_eye(cfg, e_os, s.latent.v_os, pixels_os);
        s.image_od = detail::render_eye(cfg, e_od, s.latent.v_od, pixels_od);
    }

    const auto params = cfg.true_params();
    Rng labels(cfg.seed, {index, 3});
    const copula::Marginals m{g.mu1, g.mu2, copula::sigmoid(g.logit3), copula::sigmoid(g.logit4)};
    s.labels = copula::draw_label(params, copula::cholesky_lower(params.gamma), m, labels);
    return s;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json, images.bin, labels.csv (+ latents.csv).

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kImagesMagic[8] = {'O', 'U', 'C', 'V', 'I', 'M', 'G', 'S'};

struct Dataset {
    SynthConfig config;
    std::vector<PatientSample> patients;
    std::string digest;  // SHA-256 of images.bin and labels.csv

    std::size_t size() const { return patients.size(); }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

/// Shortest representation that parses back to the same double.
inline std::string exact(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError(where + ": bad number '" + s + "'");
    return v;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + p.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + p.string());
}

template <typename T>
void append(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline std::string dataset_digest(const std::string& images, const std::string& labels) {
    return Sha256().update(images).update(labels).hex();
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace detail

namespace detail {

inline std::string encode_images(const Dataset& d) {
    const SynthConfig& cfg = d.config;
    std::string images;
    images.append(kImagesMagic, 8);
    detail::append<std::uint32_t>(images, kFormatVersion);
    detail::append<std::uint64_t>(images, 2 * d.patients.size());
    detail::append<std::uint32_t>(images, static_cast<std::uint32_t>(cfg.channels));
    detail::append<std::uint32_t>(images, static_cast<std::uint32_t>(cfg.image_size));
    detail::append<std::uint32_t>(images, static_cast<std::uint32_t>(cfg.image_size));
    for (const auto& p : d.patients) {
        for (const Image* im : {&p.image_os, &p.image_od}) {
            if (im->pixels.size() != static_cast<std::size_t>(cfg.channels) * cfg.image_size * cfg.image_size) {
                throw ShapeMismatch("write_dataset: image does not match config");
            }
            images.append(reinterpret_cast<const char*>(im->pixels.data()), im->pixels.size() * sizeof(double));
        }
    }
    return images;
}

inline std::string encode_labels(const Dataset& d) {
    std::string labels = "patient_id,al_os,al_od,hm_os,hm_od\n";
    for (std::size_t i = 0; i < d.patients.size(); ++i) {
        const auto& l = d.patients[i].labels;
        labels += std::to_string(i) + "," + exact(l.y1) + "," + exact(l.y2) + "," + std::to_string(l.y3) + "," +
                  std::to_string(l.y4) + "\n";
    }
    return labels;
}

inline std::string encode_latents(const Dataset& d) {
    std::string latents = "patient_id,u,v_os,v_od,g1,g2,g3,g4\n";
    for (std::size_t i = 0; i < d.patients.size(); ++i) {
        const auto& r = d.patients[i].latent;
        latents += std::to_string(i) + "," + exact(r.u) + "," + exact(r.v_os) + "," + exact(r.v_od) + "," +
                   exact(r.truth.mu1) + "," + exact(r.truth.mu2) + "," + exact(r.truth.logit3) + "," +
                   exact(r.truth.logit4) + "\n";
    }
    return latents;
}

}  // namespace detail

inline Dataset generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    Dataset d;
    d.config = cfg;
    d.patients.reserve(cfg.n_patients);
    for (std::size_t i = 0; i < cfg.n_patients; ++i) d.patients.push_back(generate_patient(cfg, i));
    d.digest = detail::dataset_digest(detail::encode_images(d), detail::encode_labels(d));
    return d;
}

/// Writes into a temporary sibling directory and renames it into place, so
/// an interrupted write never leaves a partial dataset at `path`.
inline std::string write_dataset(const Dataset& d, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    const std::string images = detail::encode_images(d);
    const std::string labels = detail::encode_labels(d);
    const std::string latents = detail::encode_latents(d);
    const std::string digest = detail::dataset_digest(images, labels);
    nlohmann::json manifest{{"format_version", kFormatVersion},
                            {"synth_config", to_json(d.config)},
                            {"n_patients", d.patients.size()},
                            {"dataset_digest", digest}};

    const fs::path target = fs::absolute(path);
    const fs::path tmp = target.string() + ".partial";
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp, ec);
    if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
    try {
        detail::write_file(tmp / "images.bin", images);
        detail::write_file(tmp / "labels.csv", labels);
        detail::write_file(tmp / "latents.csv", latents);
        detail::write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
        fs::remove_all(target, ec);
        fs::rename(tmp, target);
    } catch (const fs::filesystem_error& e) {
        fs::remove_all(tmp, ec);
        throw IoError(e.what());
    } catch (...) {
        fs::remove_all(tmp, ec);
        throw;
    }
    return digest;
}

/// Reads a dataset directory. Any missing, truncated or inconsistent file
/// raises FormatError (or IoError if unreadable); nothing partial is returned.
inline Dataset read_dataset(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) throw IoError("not a dataset directory: " + path.string());
    Dataset d;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::read_file(path / "manifest.json"));
        if (manifest.at("format_version").get<std::uint32_t>() != kFormatVersion) {
            throw FormatError("dataset: unsupported format version");
        }
        d.config = synth_config_from_json(manifest.at("synth_config"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    } catch (const ValidationError& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    const std::size_t n = manifest.at("n_patients").get<std::size_t>();
    const std::string images = detail::read_file(path / "images.bin");
    const std::string labels = detail::read_file(path / "labels.csv");

    constexpr std::size_t header = 8 + 4 + 8 + 4 * 3;
    if (images.size() < header || std::memcmp(images.data(), kImagesMagic, 8) != 0) {
        throw FormatError("images.bin: bad magic");
    }
    auto read_at = [&](std::size_t off, auto v) {
        std::memcpy(&v, images.data() + off, sizeof v);
        return v;
    };
    if (read_at(8, std::uint32_t{}) != kFormatVersion) throw FormatError("images.bin: unsupported version");
    const auto count = read_at(12, std::uint64_t{});
    const auto channels = read_at(20, std::uint32_t{});
    const auto height = read_at(24, std::uint32_t{});
    const auto width = read_at(28, std::uint32_t{});
    if (count != 2 * n || channels != static_cast<std::uint32_t>(d.config.channels) ||
        height != static_cast<std::uint32_t>(d.config.image_size) || width != height) {
        throw FormatError("images.bin: header disagrees with manifest");
    }
    const std::size_t per_image = static_cast<std::size_t>(channels) * height * width;
    if (images.size() != header + count * per_image * sizeof(double)) throw FormatError("images.bin: truncated");

    std::istringstream ls(labels);
    std::string line;
    if (!std::getline(ls, line) || line != "patient_id,al_os,al_od,hm_os,hm_od") {
        throw FormatError("labels.csv: bad header");
    }
    d.patients.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(ls, line)) throw FormatError("labels.csv: truncated");
        const auto cells = detail::split_csv(line);
        if (cells.size() != 5 || cells[0] != std::to_string(i)) throw FormatError("labels.csv: bad row " + line);
        auto& l = d.patients[i].labels;
        l.y1 = detail::parse_double(cells[1], "labels.csv");
        l.y2 = detail::parse_double(cells[2], "labels.csv");
        if ((cells[3] != "0" && cells[3] != "1") || (cells[4] != "0" && cells[4] != "1")) {
            throw FormatError("labels.csv: binary label not 0/1 in row " + cells[0]);
        }
        l.y3 = cells[3] == "1";
        l.y4 = cells[4] == "1";
        for (int eye = 0; eye < 2; ++eye) {
            Image& im = eye == 0 ? d.patients[i].image_os : d.patients[i].image_od;
            im = Image{static_cast<int>(channels), static_cast<int>(height), static_cast<int>(width),
                       std::vector<double>(per_image)};
            std::memcpy(im.pixels.data(), images.data() + header + (2 * i + eye) * per_image * sizeof(double),
                        per_image * sizeof(double));
        }
    }
    if (std::getline(ls, line) && !line.empty()) throw FormatError("labels.csv: extra rows");

    // Latents are diagnostics only; tolerate their absence.
    if (fs::exists(path / "latents.csv")) {
        std::istringstream lt(detail::read_file(path / "latents.csv"));
        std::getline(lt, line);
        for (std::size_t i = 0; i < n && std::getline(lt, line); ++i) {
            const auto c = detail::split_csv(line);
            if (c.size() != 8) throw FormatError("latents.csv: bad row");
            auto& r = d.patients[i].latent;
            r.u = detail::parse_double(c[1], "latents.csv");
            r.v_os = detail::parse_double(c[2], "latents.csv");
            r.v_od = detail::parse_double(c[3], "latents.csv");
            r.truth = {detail::parse_double(c[4], "latents.csv"), detail::parse_double(c[5], "latents.csv"),
                       detail::parse_double(c[6], "latents.csv"), detail::parse_double(c[7], "latents.csv")};
        }
    }
    d.digest = detail::dataset_digest(images, labels);
    if (manifest.contains("dataset_digest") && manifest["dataset_digest"] != d.digest) {
        throw FormatError("dataset: digest mismatch (files modified?)");
    }
    return d;
}

}  // namespace oucovit::synthdata
