#pragma once

// Command-line front end. `run` parses argv, dispatches and returns the exit
// code: 0 success, 1 invalid input (message names the flag), 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oucovit/oracle.hpp"
#include "oucovit/pipeline.hpp"

namespace oucovit::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::ExperimentConfig;

enum ExitCode { exit_ok = 0, exit_invalid = 1, exit_runtime = 2 };

/// Root for outputs whose --out was not given.
inline fs::path output_root() {
    const char* env = std::getenv("OUCOVIT_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

inline fs::path resolve_out(const std::string& out, const std::string& fallback) {
    return out.empty() ? output_root() / fallback : fs::path(out);
}

/// Writes through a temporary sibling so readers never see a partial file.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".partial";
    synthdata::detail::write_file(tmp, bytes);
    fs::rename(tmp, path);
}

inline std::string read_text(const std::string& path, const char* flag) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError(flag, "cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json parse_json_file(const std::string& path, const char* flag) {
    try {
        return json::parse(read_text(path, flag));
    } catch (const json::parse_error& e) {
        throw ValidationError(flag, "'" + path + "' is not valid JSON: " + e.what());
    }
}

/// Experiment flags shared by several commands. Each flag is recorded as an
/// edit applied, in command-line order, over the --config file.
class ExperimentFlags {
public:
    void attach(CLI::App* app, bool training = true) {
        app->add_option("--config", config_path_, "ExperimentConfig JSON file");
        app->add_option("--data", data_path_, "dataset directory written by synth-gen (default: generate)");
        on<int>(app, "--seed", "run seed (folds, init, batches)", [](auto& c, int v) { c.seed = static_cast<std::uint64_t>(v); });
        on<int>(app, "--folds", "number of cross-validation folds", [](auto& c, int v) {
            c.folds = v;
            const double u = 1.0 / v;
            c.split = {1.0 - 2.0 * u, u, u};
        });
        on<std::size_t>(app, "--patients", "synthetic patients when generating", [](auto& c, std::size_t v) { c.data.n_patients = v; });
        on<int>(app, "--data-seed", "synthetic data seed", [](auto& c, int v) { c.data.seed = static_cast<std::uint64_t>(v); });
        on<double>(app, "--asymmetry", "between-eye asymmetry strength", [](auto& c, double v) { c.data.asymmetry_strength = v; });
        on<int>(app, "--image-size", "image side in pixels (model and data)", [](auto& c, int v) {
            c.model.image_size = v;
            c.data.image_size = v;
        });
        on<int>(app, "--patch-size", "patch side in pixels", [](auto& c, int v) { c.model.patch_size = v; });
        on<int>(app, "--embed-dim", "token width", [](auto& c, int v) { c.model.embed_dim = v; });
        on<int>(app, "--depth", "transformer blocks", [](auto& c, int v) { c.model.depth = v; });
        on<int>(app, "--heads", "attention heads", [](auto& c, int v) { c.model.heads = v; });
        on<int>(app, "--lora-rank", "LoRA rank", [](auto& c, int v) { c.model.lora_rank = v; });
        on<double>(app, "--lora-alpha", "LoRA alpha (default: rank)", [](auto& c, double v) { c.model.lora_alpha = v; });
        on<std::vector<std::string>>(app, "--lora-targets", "projections carrying LoRA",
                                     [](auto& c, const std::vector<std::string>& v) { c.model.lora_targets = v; });
        on<std::string>(app, "--adapters", "per-eye adapters on|off", [](auto& c, const std::string& v) {
            if (v != "on" && v != "off") throw ValidationError("--adapters", "expected on or off");
            c.model.adapters_enabled = v == "on";
        });
        on<std::string>(app, "--adapter-position", "at_ffn|before_ffn|after_embedding|before_fc",
                        [](auto& c, const std::string& v) { c.model.adapter_position = nn::adapter_position_from(v); });
        on<int>(app, "--adapter-dim", "adapter bottleneck width", [](auto& c, int v) { c.model.adapter_dim = v; });
        on<double>(app, "--adapter-scale", "adapter output scale", [](auto& c, double v) { c.model.adapter_scale = v; });
        on<std::string>(app, "--head-sharing", "shared|per_eye", [](auto& c, const std::string& v) {
            if (v != "shared" && v != "per_eye") throw ValidationError("--head-sharing", "expected shared or per_eye");
            c.model.head_sharing = v == "shared" ? nn::HeadSharing::shared : nn::HeadSharing::per_eye;
        });
        if (!training) return;
        on<std::string>(app, "--loss", "Module-3 loss: empirical|copula",
                        [](auto& c, const std::string& v) { c.loss_mode = pipeline::loss_mode_from(v); });
        on<int>(app, "--epochs-warmup", "Module-1 epochs", [](auto& c, int v) { c.epochs_warmup = v; });
        on<int>(app, "--epochs-copula", "Module-3 epochs", [](auto& c, int v) { c.epochs_copula = v; });
        on<int>(app, "--batch-size", "patients per batch", [](auto& c, int v) { c.batch_size = v; });
        on<double>(app, "--lr", "initial learning rate", [](auto& c, double v) { c.lr = v; });
        on<double>(app, "--lr-after", "learning rate after the drop", [](auto& c, double v) { c.lr_after = v; });
        on<int>(app, "--lr-drop-epoch", "epoch of the learning-rate drop", [](auto& c, int v) { c.lr_drop_epoch = v; });
        on<int>(app, "--run-folds", "run only the first N folds (0 = all)", [](auto& c, int v) { c.run_folds = v; });
        on<std::string>(app, "--reestimate-copula", "re-estimate copula parameters every epoch: on|off",
                        [](auto& c, const std::string& v) {
                            if (v != "on" && v != "off") throw ValidationError("--reestimate-copula", "expected on or off");
                            c.reestimate_copula = v == "on";
                        });
    }

    ExperimentConfig resolve() const {
        ExperimentConfig cfg;
        if (!config_path_.empty()) {
            try {
                cfg = pipeline::experiment_config_from_json(parse_json_file(config_path_, "--config"));
            } catch (const ValidationError& e) {
                throw ValidationError("--config", e.what());
            }
        }
        if (!data_path_.empty()) cfg.data_path = data_path_;
        for (const auto& edit : edits_) edit(cfg);
        try {
            cfg.validate();
        } catch (const ValidationError& e) {
            throw ValidationError(flag_for(e.field()), e.what());
        }
        return cfg;
    }

private:
    /// Config field name to the flag that sets it, e.g. model.lora_rank -> --lora-rank.
    static std::string flag_for(std::string field) {
        if (const auto dot = field.rfind('.'); dot != std::string::npos) field = field.substr(dot + 1);
        std::replace(field.begin(), field.end(), '_', '-');
        return "--" + field;
    }

    template <typename T, typename F>
    void on(CLI::App* app, const std::string& flag, const std::string& help, F set) {
        app->add_option_function<T>(
            flag,
            [this, flag, set](const T& v) {
                edits_.push_back([flag, set, v](ExperimentConfig& c) {
                    try {
                        set(c, v);
                    } catch (const ValidationError& e) {
                        throw ValidationError(flag, e.what());
                    }
                });
            },
            help);
    }

    std::string config_path_;
    std::string data_path_;
    std::vector<std::function<void(ExperimentConfig&)>> edits_;
};

inline std::string fixed(double v, int digits = 4) {
    if (!std::isfinite(v)) return "NA";
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline void print_metrics(std::ostream& out, const pipeline::MetricsRecord& m) {
    for (const auto& [name, field] : pipeline::metric_fields()) {
        out << std::left << std::setw(12) << name << fixed(m.*field) << "\n";
    }
    if (!m.auc_defined) out << "note: AUC undefined (single-class split)\n";
}

inline json metrics_to_json(const pipeline::MetricsRecord& m) {
    json j = pipeline::detail::metrics_json(m);
    j["fold"] = m.fold;
    j["loss_mode"] = m.loss_mode;
    j["auc_defined"] = m.auc_defined;
    j["floor_events"] = m.floor_events;
    j["config_digest"] = m.config_digest;
    return j;
}

inline pipeline::Dataset load_data(const ExperimentConfig& cfg) {
    auto data = pipeline::load_or_generate(cfg);
    if (data.config.image_size != cfg.model.image_size || data.config.channels != cfg.model.channels) {
        throw ValidationError("--data", "dataset image size/channels do not match the model");
    }
    return data;
}

inline pipeline::FoldSplit split_for(const ExperimentConfig& cfg, const pipeline::Dataset& data, int fold) {
    if (fold < 0 || fold >= cfg.folds) throw ValidationError("--fold", "must be in [0, folds)");
    return pipeline::fold_split(pipeline::assign_folds(data.size(), cfg.folds, cfg.seed), fold);
}

// ---------------------------------------------------------------------------
// report

struct RunColumn {
    std::string run;
    std::string label;  // baseline / adapters-only / copula-only / full
    int rank = 0;
    std::string loss_mode;
    bool adapters = false;
    json stats;  // metric -> {mean, std, n}
};

inline std::string configuration_name(bool adapters, const std::string& loss_mode) {
    if (loss_mode == "copula") return adapters ? "full" : "copula-only";
    return adapters ? "adapters-only" : "baseline";
}

inline int configuration_order(const std::string& label) {
    static const std::vector<std::string> order{"baseline", "adapters-only", "copula-only", "full"};
    return static_cast<int>(std::find(order.begin(), order.end(), label) - order.begin());
}

inline bool higher_is_better(const std::string& metric) { return metric.starts_with("auc"); }

struct ReportResult {
    std::vector<RunColumn> columns;
    std::vector<std::string> warnings;
    std::string csv;
    std::string table;
};

inline ReportResult build_report(const std::vector<std::string>& dirs, bool force) {
    ReportResult r;
    std::vector<std::string> missing;
    std::vector<json> summaries;
    for (const auto& d : dirs) {
        const fs::path p = fs::path(d) / "summary.json";
        if (!fs::exists(p)) {
            missing.push_back(d);
            continue;
        }
        try {
            summaries.push_back(json::parse(read_text(p.string(), "runs")));
        } catch (const json::parse_error&) {
            missing.push_back(d + " (unreadable summary.json)");
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += "\n  " + m;
        throw MissingSummary("no summary.json in:" + list);
    }
    std::set<std::string> datasets;
    std::set<std::uint64_t> seeds;
    for (const auto& s : summaries) {
        datasets.insert(s.at("dataset_digest").get<std::string>());
        seeds.insert(s.at("seed").get<std::uint64_t>());
    }
    if (datasets.size() > 1 && !force) {
        throw ValidationError("--force", "runs use different datasets; pass --force to aggregate anyway");
    }
    if (datasets.size() > 1) r.warnings.push_back("runs use different datasets (aggregated because of --force)");
    if (seeds.size() > 1) r.warnings.push_back("runs use different seeds; comparisons are not paired");

    for (std::size_t i = 0; i < summaries.size(); ++i) {
        const auto& s = summaries[i];
        for (auto it = s.at("modes").begin(); it != s.at("modes").end(); ++it) {
            RunColumn c;
            c.run = dirs[i];
            c.loss_mode = it.key();
            c.adapters = s.at("adapters").get<bool>();
            c.rank = s.at("lora_rank").get<int>();
            c.label = configuration_name(c.adapters, c.loss_mode);
            c.stats = it.value();
            r.columns.push_back(std::move(c));
        }
    }
    std::stable_sort(r.columns.begin(), r.columns.end(), [](const RunColumn& a, const RunColumn& b) {
        return std::pair(a.rank, configuration_order(a.label)) < std::pair(b.rank, configuration_order(b.label));
    });

    auto mean_of = [](const RunColumn& c, const std::string& m) {
        const auto& v = c.stats.at(m).at("mean");
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    auto std_of = [](const RunColumn& c, const std::string& m) {
        const auto& v = c.stats.at(m).at("std");
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };

    // Best per metric across all columns.
    std::map<std::string, double> best;
    for (const auto& [m, _] : pipeline::metric_fields()) {
        double b = std::numeric_limits<double>::quiet_NaN();
        for (const auto& c : r.columns) {
            const double v = mean_of(c, m);
            if (!std::isfinite(v)) continue;
            if (!std::isfinite(b) || (higher_is_better(m) ? v > b : v < b)) b = v;
        }
        best[m] = b;
    }

    r.csv = "configuration,rank,loss_mode,adapters,run,metric,mean,std,n,best\n";
    for (const auto& c : r.columns) {
        for (const auto& [m, _] : pipeline::metric_fields()) {
            const double v = mean_of(c, m);
            r.csv += c.label + "," + std::to_string(c.rank) + "," + c.loss_mode + "," + (c.adapters ? "on" : "off") +
                     "," + c.run + "," + m + "," + pipeline::format_number(v) + "," +
                     pipeline::format_number(std_of(c, m)) + "," + std::to_string(c.stats.at(m).at("n").get<int>()) +
                     "," + (std::isfinite(v) && v == best[m] ? "1" : "0") + "\n";
        }
    }

    std::ostringstream t;
    t << std::left << std::setw(12) << "metric";
    for (const auto& c : r.columns) t << " | " << std::setw(22) << (c.label + " r=" + std::to_string(c.rank));
    t << "\n";
    for (const auto& [m, _] : pipeline::metric_fields()) {
        t << std::setw(12) << m;
        for (const auto& c : r.columns) {
            const double v = mean_of(c, m);
            std::string cell = fixed(v) + " +- " + fixed(std_of(c, m));
            if (std::isfinite(v) && v == best[m]) cell += " *";
            t << " | " << std::setw(22) << cell;
        }
        t << "\n";
    }
    r.table = t.str();
    return r;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bi-channel copula-loss vision transformer laboratory", "oucovit"};
    app.require_subcommand(1);
    app.fallthrough();
    bool as_json = false;
    bool verbose = false;
    app.add_flag("--json", as_json, "machine-readable JSON on stdout");
    app.add_flag("-v,--verbose", verbose, "per-epoch progress on stderr");
    std::function<int()> action;

    // synth-gen
    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic paired-eye dataset");
    ExperimentFlags synth_flags;
    synth_flags.attach(synth, false);
    std::string synth_out;
    synth->add_option("--out", synth_out, "output directory");
    synth->callback([&] {
        action = [&] {
            const auto cfg = synth_flags.resolve();
            const auto data = synthdata::generate_dataset(cfg.data);
            const fs::path dir = resolve_out(synth_out, "dataset_" + data.digest.substr(0, 12));
            synthdata::write_dataset(data, dir);
            if (as_json) {
                out << json{{"path", dir.string()}, {"dataset_digest", data.digest}, {"n_patients", data.size()},
                            {"seed", cfg.data.seed}}
                           .dump()
                    << "\n";
            } else {
                out << "wrote " << data.size() << " patients to " << dir.string() << "\ndataset digest "
                    << data.digest << "\n";
            }
            return exit_ok;
        };
    });

    // train
    auto* train = app.add_subcommand("train", "run the training modules on one fold");
    ExperimentFlags train_flags;
    train_flags.attach(train);
    std::string train_out, train_stage = "all", train_ckpt, train_params;
    int train_fold = 0;
    train->add_option("--out", train_out, "output directory");
    train->add_option("--fold", train_fold, "fold index");
    train->add_option("--stage", train_stage, "all | warmup | copula")->check(CLI::IsMember({"all", "warmup", "copula"}));
    train->add_option("--checkpoint", train_ckpt, "warm-up checkpoint (stage copula)");
    train->add_option("--params", train_params, "copula parameters from estimate-copula (stage copula)");
    train->callback([&] {
        action = [&] {
            auto cfg = train_flags.resolve();
            const auto data = load_data(cfg);
            const auto split = split_for(cfg, data, train_fold);
            const std::string digest = pipeline::config_digest(cfg);
            const fs::path dir = resolve_out(train_out, "train_" + digest + "_fold" + std::to_string(train_fold));
            const fs::path tmp = dir.string() + ".partial";
            fs::remove_all(tmp);
            fs::create_directories(tmp);
            std::string log;
            pipeline::LogSink sink = [&](const json& rec) {
                json r = rec;
                r["config_digest"] = digest;
                r["loss_mode"] = pipeline::to_string(cfg.loss_mode);
                log += r.dump() + "\n";
                if (verbose) err << r.dump() << "\n";
            };
            json result{{"config_digest", digest}, {"seed", cfg.seed}, {"fold", train_fold}, {"stage", train_stage}};
            try {
                std::optional<pipeline::MetricsRecord> metrics;
                if (train_stage == "all") {
                    metrics = pipeline::run_fold(cfg, data, split, train_fold, sink, tmp);
                } else if (train_stage == "warmup") {
                    const pipeline::TrainingContext ctx{cfg, data, split, train_fold, sink};
                    auto warm = pipeline::run_warmup(ctx);
                    nn::save_checkpoint(warm.model, tmp / "warmup.ckpt");
                } else {
                    if (train_ckpt.empty()) throw ValidationError("--checkpoint", "required for --stage copula");
                    copula::CopulaParams params;
                    if (cfg.loss_mode == pipeline::LossMode::copula) {
                        if (train_params.empty()) {
                            throw ValidationError("--params", "copula training needs parameters from estimate-copula");
                        }
                        params = copula::params_from_json(parse_json_file(train_params, "--params"));
                        if (params.meta.fold != train_fold) {
                            throw ValidationError("--params", "estimated on fold " + std::to_string(params.meta.fold));
                        }
                    }
                    auto model = nn::load_checkpoint(train_ckpt);
                    cfg.model = model.config();
                    const pipeline::TrainingContext ctx{cfg, data, split, train_fold, sink};
                    long floors = 0;
                    model = pipeline::run_copula_training(ctx, std::move(model), params, &floors);
                    nn::save_checkpoint(model, tmp / "final.ckpt");
                    auto m = pipeline::evaluate(model, data, split.test);
                    m.fold = train_fold;
                    m.loss_mode = pipeline::to_string(cfg.loss_mode);
                    m.adapters = cfg.model.adapters_enabled;
                    m.rank = cfg.model.lora_rank;
                    m.floor_events = floors;
                    m.config_digest = digest;
                    metrics = m;
                }
                synthdata::detail::write_file(tmp / "log.jsonl", log);
                if (metrics) {
                    synthdata::detail::write_file(
                        tmp / "metrics.csv", pipeline::metrics_csv_header() + pipeline::metrics_csv_row(*metrics));
                    const json summary{{"config_digest", digest},
                                       {"dataset_digest", data.digest},
                                       {"seed", cfg.seed},
                                       {"folds_run", 1},
                                       {"adapters", cfg.model.adapters_enabled},
                                       {"lora_rank", cfg.model.lora_rank},
                                       {"adapter_position", nn::to_string(cfg.model.adapter_position)},
                                       {"config", pipeline::to_json(cfg)},
                                       {"modes", pipeline::summarize({*metrics})}};
                    synthdata::detail::write_file(tmp / "summary.json", summary.dump(2) + "\n");
                    result["test"] = metrics_to_json(*metrics);
                }
                fs::remove_all(dir);
                fs::rename(tmp, dir);
            } catch (...) {
                std::error_code ec;
                fs::remove_all(tmp, ec);
                throw;
            }
            result["path"] = dir.string();
            if (as_json) {
                out << result.dump() << "\n";
            } else {
                out << "wrote " << dir.string() << "\n";
                if (result.contains("test")) out << result["test"].dump(2) << "\n";
            }
            return exit_ok;
        };
    });

    // estimate-copula
    auto* est = app.add_subcommand("estimate-copula", "estimate copula parameters from a warm-up checkpoint");
    ExperimentFlags est_flags;
    est_flags.attach(est);
    std::string est_ckpt, est_out;
    int est_fold = 0;
    est->add_option("--checkpoint", est_ckpt, "warm-up checkpoint")->required();
    est->add_option("--fold", est_fold, "fold whose training split is used");
    est->add_option("--out", est_out, "output JSON file");
    est->callback([&] {
        action = [&] {
            auto cfg = est_flags.resolve();
            auto model = nn::load_checkpoint(est_ckpt);
            cfg.model = model.config();
            const auto data = load_data(cfg);
            const auto split = split_for(cfg, data, est_fold);
            const auto preds = pipeline::predict(model, data, split.train);
            copula::ParamsMeta meta;
            const std::string digest = pipeline::config_digest(cfg);
            meta.source_run = fs::path(est_ckpt).string();
            meta.fold = est_fold;
            meta.config_digest = digest;
            const auto params = pipeline::run_copula_estimation(preds.preds, preds.labels, meta);
            const fs::path path = resolve_out(est_out, "copula_" + digest + "_fold" + std::to_string(est_fold) + ".json");
            write_atomic(path, copula::to_json(params).dump(2) + "\n");
            if (as_json) {
                out << json{{"path", path.string()}, {"params", copula::to_json(params)}}.dump() << "\n";
            } else {
                out << "wrote " << path.string() << "\n" << copula::to_json(params).dump(2) << "\n";
            }
            return exit_ok;
        };
    });

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a fold split");
    ExperimentFlags ev_flags;
    ev_flags.attach(ev);
    std::string ev_ckpt, ev_split = "test";
    int ev_fold = 0;
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--fold", ev_fold, "fold index");
    ev->add_option("--split", ev_split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
    ev->callback([&] {
        action = [&] {
            auto cfg = ev_flags.resolve();
            auto model = nn::load_checkpoint(ev_ckpt);
            cfg.model = model.config();
            const auto data = load_data(cfg);
            const auto split = split_for(cfg, data, ev_fold);
            std::vector<std::size_t> ids = ev_split == "train" ? split.train : ev_split == "val" ? split.val : split.test;
            if (ev_split == "all") {
                ids.resize(data.size());
                std::iota(ids.begin(), ids.end(), 0);
            }
            auto m = pipeline::evaluate(model, data, ids);
            m.fold = ev_fold;
            m.loss_mode = ev_split;
            m.config_digest = pipeline::config_digest(cfg);
            if (as_json) {
                json j = metrics_to_json(m);
                j.erase("loss_mode");
                j["split"] = ev_split;
                out << j.dump() << "\n";
            } else {
                print_metrics(out, m);
            }
            return exit_ok;
        };
    });

    // crossval
    auto* cv = app.add_subcommand("crossval", "cross-validate the three-module procedure");
    ExperimentFlags cv_flags;
    cv_flags.attach(cv);
    std::string cv_out, cv_modes;
    int jobs = 1;
    cv->add_option("--modes", cv_modes, "loss modes to run: empirical | copula | both (default: --loss)")
        ->check(CLI::IsMember({"empirical", "copula", "both"}));
    cv->add_option("--jobs", jobs, "parallel fold workers")->check(CLI::PositiveNumber);
    cv->add_option("--out", cv_out, "output directory");
    cv->callback([&] {
        action = [&] {
            const auto cfg = cv_flags.resolve();
            const auto data = load_data(cfg);
            std::vector<pipeline::LossMode> modes{cfg.loss_mode};
            if (cv_modes == "both") modes = {pipeline::LossMode::empirical, pipeline::LossMode::copula};
            if (cv_modes == "empirical") modes = {pipeline::LossMode::empirical};
            if (cv_modes == "copula") modes = {pipeline::LossMode::copula};
            const fs::path dir = resolve_out(cv_out, "crossval_" + pipeline::config_digest(cfg));
            pipeline::LogSink progress;
            if (verbose) progress = [&](const json& r) { err << r.dump() << "\n"; };
            const auto res = pipeline::run_crossval(cfg, data, modes, dir, progress, jobs);
            if (as_json) {
                json j = res.summary;
                j.erase("config");
                j["path"] = dir.string();
                out << j.dump() << "\n";
            } else {
                out << "wrote " << dir.string() << " (" << res.records.size() << " fold runs)\n";
                for (auto it = res.summary["modes"].begin(); it != res.summary["modes"].end(); ++it) {
                    out << it.key() << ":\n";
                    for (const auto& [name, _] : pipeline::metric_fields()) {
                        const auto& s = it.value()[name];
                        out << "  " << std::left << std::setw(12) << name
                            << (s["mean"].is_null() ? std::string("NA") : fixed(s["mean"].get<double>())) << " +- "
                            << (s["std"].is_null() ? std::string("NA") : fixed(s["std"].get<double>())) << "\n";
                    }
                }
            }
            return exit_ok;
        };
    });

    // oracle-check
    auto* oc = app.add_subcommand("oracle-check", "compare closed forms against the numerical oracles");
    int oc_cases = 100;
    int oc_seed = 0;
    oc->add_option("--cases", oc_cases, "random cases per check")->check(CLI::PositiveNumber);
    oc->add_option("--seed", oc_seed, "seed");
    oc->callback([&] {
        action = [&] {
            const auto s = static_cast<std::uint64_t>(oc_seed);
            const std::vector<oracle::CheckResult> checks{
                oracle::check_density(oc_cases, s), oracle::check_loss_gradients(oc_cases, s),
                oracle::check_bvn(5 * oc_cases, s), oracle::check_bvn_orthant(),
                oracle::check_normalization(std::max(1, oc_cases / 10), s)};
            bool all = true;
            for (const auto& c : checks) all = all && c.pass();
            if (as_json) {
                json rows = json::array();
                for (const auto& c : checks) {
                    rows.push_back({{"check", c.name},
                                    {"cases", c.cases},
                                    {"max_err", c.max_err},
                                    {"error_kind", c.relative ? "relative" : "absolute"},
                                    {"tolerance", c.tolerance},
                                    {"floored", c.floored},
                                    {"pass", c.pass()}});
                }
                out << json{{"seed", oc_seed}, {"cases", oc_cases}, {"max_rel_err", checks[0].max_err},
                            {"pass", all},     {"checks", rows}}
                           .dump()
                    << "\n";
            } else {
                out << std::left << std::setw(38) << "check" << std::setw(7) << "cases" << std::setw(14) << "max err"
                    << std::setw(11) << "tolerance" << "result\n";
                for (const auto& c : checks) {
                    std::ostringstream e, t;
                    e << std::scientific << std::setprecision(2) << c.max_err << (c.relative ? " r" : " a");
                    t << std::scientific << std::setprecision(0) << c.tolerance;
                    out << std::setw(38) << c.name << std::setw(7) << c.cases << std::setw(14) << e.str()
                        << std::setw(11) << t.str() << (c.pass() ? "PASS" : "FAIL") << "\n";
                }
            }
            return all ? exit_ok : exit_runtime;
        };
    });

    // report
    auto* rep = app.add_subcommand("report", "compare cross-validation runs");
    std::vector<std::string> rep_dirs;
    std::string rep_out;
    bool rep_force = false;
    rep->add_option("runs", rep_dirs, "run directories containing summary.json")->required();
    rep->add_option("--out", rep_out, "merged CSV path");
    rep->add_flag("--force", rep_force, "aggregate runs on different datasets");
    rep->callback([&] {
        action = [&] {
            const auto r = build_report(rep_dirs, rep_force);
            const fs::path path = resolve_out(rep_out, "report.csv");
            write_atomic(path, r.csv);
            if (as_json) {
                json cols = json::array();
                for (const auto& c : r.columns) {
                    cols.push_back({{"configuration", c.label},
                                    {"rank", c.rank},
                                    {"loss_mode", c.loss_mode},
                                    {"adapters", c.adapters},
                                    {"run", c.run},
                                    {"metrics", c.stats}});
                }
                out << json{{"csv", path.string()}, {"warnings", r.warnings}, {"columns", cols}}.dump() << "\n";
            } else {
                for (const auto& w : r.warnings) out << "warning: " << w << "\n";
                out << r.table << "wrote " << path.string() << "\n";
            }
            return exit_ok;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_invalid;
    }
    try {
        return action();
    } catch (const ValidationError& e) {
        err << "invalid: " << e.what() << "\n";
        return exit_invalid;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}

}  // namespace oucovit::cli
