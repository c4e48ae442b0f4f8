#include "nesbs/cli.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace nesbs;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (code != 0) std::cerr << "cli stderr: " << err.str();
    return code;
}

const char* kTinyConfig = R"(
seed = 7

[dataset]
kind = "blobs"
n = 120
test_n = 80
label_noise = 0.0

[space]
depth = 2
hidden = 4

[supernet]
epochs = 2
batch_size = 32

[posterior]
estimator = "exact"
epochs = 3
steps_per_epoch = 5

[sampler]
method = "mc"
iterations = 3
ensemble_size = 2

[eval]
retrain_epochs = 2
pgd_iters = 3
estimation_sample = 2
)";

TEST(Toml, ParseSubset) {
    toml::Table t = toml::parse(R"(
# comment
top = 3
[a]
s = "hi # not a comment"
f = 1.5            # trailing comment
flag = true
arr = [1, 2, 3]
names = ["x", "y"]
neg = -2.5e-3
)");
    EXPECT_EQ(t.at("top").as_int(), 3);
    EXPECT_EQ(t.at("a.s").as_string(), "hi # not a comment");
    EXPECT_DOUBLE_EQ(t.at("a.f").as_number(), 1.5);
    EXPECT_TRUE(t.at("a.flag").as_bool());
    EXPECT_EQ(t.at("a.arr").as_array().size(), 3u);
    EXPECT_EQ(t.at("a.names").as_array()[1].as_string(), "y");
    EXPECT_DOUBLE_EQ(t.at("a.neg").as_number(), -2.5e-3);
}

TEST(Toml, SerializeParseRoundTrip) {
    toml::Table t = toml::parse(kTinyConfig);
    toml::Table back = toml::parse(toml::serialize(t));
    EXPECT_EQ(toml::serialize(back), toml::serialize(t));
}

TEST(Toml, Errors) {
    EXPECT_THROW(toml::parse("key"), ConfigError);
    EXPECT_THROW(toml::parse("[unclosed"), ConfigError);
    EXPECT_THROW(toml::parse("x = "), ConfigError);
    EXPECT_THROW(toml::parse("x = \"unterminated"), ConfigError);
    EXPECT_THROW(toml::parse("x = zebra"), ConfigError);
}

TEST(Config, RoundTripIsIdentity) {
    RunConfig cfg = RunConfig::from_toml(kTinyConfig);
    cfg.out = "somewhere";
    const std::string once = cfg.to_toml();
    RunConfig back = RunConfig::from_toml(once);
    EXPECT_EQ(back.to_toml(), once);
    EXPECT_EQ(back.seed, 7u);
    EXPECT_EQ(back.dataset.kind, "blobs");
    EXPECT_EQ(back.space.depth, 2);
    EXPECT_EQ(back.sampler.method, "mc");
}

TEST(Config, HashIgnoresOutButTracksFields) {
    RunConfig a = RunConfig::from_toml(kTinyConfig);
    a.out = "dir1";
    RunConfig b = a;
    b.out = "dir2";
    EXPECT_EQ(a.config_hash(), b.config_hash());
    b.sampler.delta = 0.75;
    EXPECT_NE(a.config_hash(), b.config_hash());
}

TEST(Config, MissingSeedRejected) {
    RunConfig cfg = RunConfig::from_toml("[dataset]\nkind = \"blobs\"\n");
    cfg.out = "x";
    EXPECT_THROW(cfg.validate(), ConfigError);
}

struct CliFixture {
    testutil::TempDir tmp{"cli"};
    std::filesystem::path config;

    CliFixture() {
        config = tmp.path() / "config.toml";
        std::ofstream out(config);
        out << kTinyConfig;
    }

    std::filesystem::path outdir(const std::string& name) const { return tmp.path() / name; }
};

TEST(Cli, PipelineProducesAllArtifacts) {
    CliFixture f;
    const auto out = f.outdir("run");
    ASSERT_EQ(run({"pipeline", "--config", f.config.string(), "--out", out.string()}), 0);

    std::ifstream mf(out / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    for (const char* phase :
         {"train-supernet", "fit-posterior", "search", "evaluate", "attack-eval"}) {
        ASSERT_TRUE(manifest["phases"].contains(phase)) << phase;
        for (const auto& [name, rel] :
             manifest["phases"][phase]["artifacts"].get<std::map<std::string, std::string>>())
            EXPECT_TRUE(std::filesystem::exists(out / rel)) << phase << "/" << name;
    }
    EXPECT_TRUE(std::filesystem::exists(out / "supernet" / "manifest.json"));
    EXPECT_TRUE(std::filesystem::exists(out / "posterior.json"));
    EXPECT_TRUE(std::filesystem::exists(out / "search_result.json"));
    EXPECT_TRUE(std::filesystem::exists(out / "eval_report.json"));
    EXPECT_TRUE(std::filesystem::exists(out / "attack_report.json"));
    // lock released on completion
    EXPECT_FALSE(std::filesystem::exists(out / ".lock"));
}

TEST(Cli, SearchBeforeFitIsPrerequisiteError) {
    CliFixture f;
    const auto out = f.outdir("run2");
    ASSERT_EQ(run({"train-supernet", "--config", f.config.string(), "--out", out.string()}), 0);
    std::ostringstream sink, err;
    EXPECT_EQ(run_cli({"search", "--config", f.config.string(), "--out", out.string()}, sink, err),
              3);
    EXPECT_NE(err.str().find("fit-posterior"), std::string::npos);
}

TEST(Cli, RerunIsByteIdenticalModuloTimestamps) {
    CliFixture f;
    const auto out1 = f.outdir("a");
    const auto out2 = f.outdir("b");
    ASSERT_EQ(run({"pipeline", "--config", f.config.string(), "--out", out1.string()}), 0);
    ASSERT_EQ(run({"pipeline", "--config", f.config.string(), "--out", out2.string()}), 0);
    for (const char* rel : {"posterior.json", "search_result.json", "eval_report.json",
                            "attack_report.json", "train_log.csv", "elbo_trace.csv",
                            "predictions.csv", "fairness.json"})
        EXPECT_EQ(slurp(out1 / rel), slurp(out2 / rel)) << rel;
    EXPECT_EQ(slurp(out1 / "supernet" / "stem_w.f64"), slurp(out2 / "supernet" / "stem_w.f64"));
}

TEST(Cli, StaleConfigRejected) {
    CliFixture f;
    const auto out = f.outdir("stale");
    ASSERT_EQ(run({"train-supernet", "--config", f.config.string(), "--out", out.string()}), 0);
    std::ostringstream sink, err;
    // different seed changes the config hash
    EXPECT_EQ(run_cli({"fit-posterior", "--config", f.config.string(), "--out", out.string(),
                       "--seed", "8"},
                      sink, err),
              3);
}

TEST(Cli, ConcurrentInvocationRejectedByLock) {
    CliFixture f;
    const auto out = f.outdir("locked");
    std::filesystem::create_directories(out);
    DirLock hold(out);
    std::ostringstream sink, err;
    EXPECT_EQ(run_cli({"train-supernet", "--config", f.config.string(), "--out", out.string()},
                      sink, err),
              2);
}

TEST(Cli, MissingSeedIsConfigError) {
    CliFixture f;
    std::ostringstream sink, err;
    EXPECT_EQ(run_cli({"train-supernet", "--out", f.outdir("noseed").string()}, sink, err), 2);
}

TEST(Cli, OutRootEnvironmentOverride) {
    CliFixture f;
    const auto root = f.outdir("rooted");
    std::filesystem::create_directories(root);
    ::setenv("NESBS_OUT_ROOT", root.c_str(), 1);
    const int code = run({"train-supernet", "--config", f.config.string(), "--out", "rel"});
    ::unsetenv("NESBS_OUT_ROOT");
    ASSERT_EQ(code, 0);
    EXPECT_TRUE(std::filesystem::exists(root / "rel" / "supernet" / "manifest.json"));
    EXPECT_FALSE(std::filesystem::exists(std::filesystem::path("rel")));
}

TEST(Cli, ReproFig2WritesSummaryAndTrajectories) {
    CliFixture f;
    const auto out = f.outdir("fig2");
    // shrunk delta list for speed; full caption settings run in acceptance
    ASSERT_EQ(run({"repro-fig2", "--deltas", "0.5", "--seed", "3", "--out", out.string()}), 0);
    EXPECT_TRUE(std::filesystem::exists(out / "fig2_summary.csv"));
    EXPECT_TRUE(std::filesystem::exists(out / "trajectory_delta_0.5.csv"));
    std::istringstream is(slurp(out / "fig2_summary.csv"));
    std::string header, row;
    std::getline(is, header);
    EXPECT_EQ(header, "delta,mean_pairwise_distance,high_density_fraction");
    int rows = 0;
    while (std::getline(is, row)) ++rows;
    EXPECT_EQ(rows, 1);

    const std::string first = slurp(out / "fig2_summary.csv");
    std::filesystem::remove_all(out);
    ASSERT_EQ(run({"repro-fig2", "--deltas", "0.5", "--seed", "3", "--out", out.string()}), 0);
    EXPECT_EQ(slurp(out / "fig2_summary.csv"), first);
}

} // namespace
