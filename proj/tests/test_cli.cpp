#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "../tools/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "oucovit");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = oucovit::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() / ("oucovit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string p(const std::string& name) const { return (dir / name).string(); }

    std::vector<std::string> tiny(std::vector<std::string> args) const {
        for (const char* a : {"--image-size", "16", "--patch-size", "8", "--embed-dim", "16", "--depth", "1", "--heads",
                              "2", "--epochs-warmup", "1", "--epochs-copula", "1", "--lr", "1e-3", "--run-folds", "1"}) {
            args.emplace_back(a);
        }
        return args;
    }

    void make_data(const std::string& name, int seed = 1) {
        ASSERT_EQ(run({"synth-gen", "--out", p(name), "--patients", "60", "--image-size", "16", "--data-seed",
                       std::to_string(seed)})
                      .code,
                  0);
    }

    fs::path dir;
};

}  // namespace

TEST_F(Cli, SynthGenIsDeterministic) {
    make_data("a", 7);
    make_data("b", 7);
    for (const char* f : {"images.bin", "labels.csv", "latents.csv", "manifest.json"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    const auto r = run({"synth-gen", "--json", "--out", p("c"), "--patients", "60", "--image-size", "16"});
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(json::parse(r.out)["n_patients"], 60);
}

TEST_F(Cli, ExitCodesAndFlagNames) {
    auto r = run({"crossval", "--batch-size", "0"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--batch-size"), std::string::npos);
    r = run({"crossval", "--no-such-flag", "1"});
    EXPECT_EQ(r.code, 1);
    r = run({"train", "--adapters", "maybe"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--adapters"), std::string::npos);
    r = run({"eval", "--checkpoint", p("missing.ckpt"), "--image-size", "16"});
    EXPECT_EQ(r.code, 2);
    r = run({});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(Cli, ConfigFileWithFlagOverrides) {
    std::ofstream(p("cfg.json")) << R"({"batch_size": 8, "lr": 0.5})";
    auto r = run({"crossval", "--config", p("cfg.json"), "--lr", "-1"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--lr"), std::string::npos);
    std::ofstream(p("bad.json")) << R"({"batch_sise": 8})";
    r = run({"crossval", "--config", p("bad.json")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("batch_sise"), std::string::npos);
}

TEST_F(Cli, StagedTrainingEnforcesProtocol) {
    make_data("d");
    auto r = run(tiny({"train", "--data", p("d"), "--stage", "warmup", "--out", p("w")}));
    ASSERT_EQ(r.code, 0) << r.err;
    // Module 3 without a Module-2 artifact is refused.
    r = run(tiny({"train", "--data", p("d"), "--stage", "copula", "--checkpoint", p("w/warmup.ckpt"), "--out", p("c")}));
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(p("c")));
    r = run(tiny({"estimate-copula", "--data", p("d"), "--checkpoint", p("w/warmup.ckpt"), "--out", p("params.json")}));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto params = json::parse(slurp(p("params.json")));
    EXPECT_EQ(params["meta"]["split"], "train");
    r = run(tiny({"--json", "train", "--data", p("d"), "--stage", "copula", "--checkpoint", p("w/warmup.ckpt"),
                  "--params", p("params.json"), "--out", p("c")}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(json::parse(r.out).contains("test"));
    r = run(tiny({"eval", "--json", "--data", p("d"), "--checkpoint", p("c/final.ckpt"), "--split", "val"}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(json::parse(r.out)["split"], "val");
}

TEST_F(Cli, CrossvalAndReport) {
    make_data("d");
    make_data("other", 2);
    auto r = run(tiny({"crossval", "--json", "--data", p("d"), "--modes", "both", "--out", p("cv1")}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(json::parse(r.out)["folds_run"], 1);
    r = run(tiny({"crossval", "--data", p("d"), "--adapters", "off", "--loss", "empirical", "--seed", "4", "--out",
                  p("cv2")}));
    ASSERT_EQ(r.code, 0) << r.err;
    r = run(tiny({"crossval", "--data", p("other"), "--out", p("cv3")}));
    ASSERT_EQ(r.code, 0) << r.err;

    r = run({"report", "--out", p("rep.csv"), p("cv1"), p("cv2")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("warning: runs use different seeds"), std::string::npos);
    EXPECT_NE(r.out.find("baseline r=4"), std::string::npos);
    EXPECT_NE(r.out.find("full r=4"), std::string::npos);
    const auto csv = slurp(p("rep.csv"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 9);

    // Different datasets need --force.
    EXPECT_EQ(run({"report", "--out", p("rep2.csv"), p("cv1"), p("cv3")}).code, 1);
    EXPECT_EQ(run({"report", "--out", p("rep2.csv"), "--force", p("cv1"), p("cv3")}).code, 0);

    r = run({"report", p("cv1"), p("nothing1"), p("nothing2")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("nothing1"), std::string::npos);
    EXPECT_NE(r.err.find("nothing2"), std::string::npos);
}

TEST_F(Cli, OutputRootFromEnvironment) {
    ::setenv("OUCOVIT_OUTPUT_ROOT", dir.c_str(), 1);
    const auto r = run({"synth-gen", "--json", "--patients", "10", "--image-size", "8"});
    ::unsetenv("OUCOVIT_OUTPUT_ROOT");
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path out = json::parse(r.out)["path"].get<std::string>();
    EXPECT_EQ(out.parent_path(), dir);
    EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, OracleCheckJson) {
    const auto r = run({"oracle-check", "--json", "--cases", "20", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_LE(j["max_rel_err"].get<double>(), 1e-5);
    EXPECT_TRUE(j["pass"].get<bool>());
    EXPECT_EQ(j["checks"].size(), 5u);
}
