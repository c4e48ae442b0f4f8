#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nesbs/data.hpp"
#include "nesbs/enssearch.hpp"
#include "nesbs/error.hpp"
#include "nesbs/posterior.hpp"
#include "nesbs/searchspace.hpp"
#include "nesbs/supertrain.hpp"
#include "nesbs/toml.hpp"

namespace nesbs {

struct DatasetConfig {
    std::string kind = "planted-hetero"; // blobs | moons | planted-hetero | idx
    int n = 3000;
    int test_n = 2000;
    int subpopulations = 3;
    double label_noise = 0.1;
    double split_fraction = 0.7;
    std::string images, labels;           // idx training pair
    std::string test_images, test_labels; // idx held-out pair
};

struct SpaceConfig {
    int depth = 4;
    std::vector<std::string> opset = {"dense-relu", "dense-tanh", "identity"};
    int hidden = 16;
};

struct PosteriorConfig {
    std::string estimator = "exact"; // exact | st-gumbel
    double tau = 1.0;
    int epochs = 20;
    double lr = 0.01;
    int batch_size = 64;
    int steps_per_epoch = 25;
    double gumbel_temp = 1.0;
    double likelihood_scale = 0.0; // 0 = auto
    int scale_cap = 512;
};

struct SamplerConfig {
    std::string method = "svgd-rd"; // mc | svgd-rd | urs
    int ensemble_size = 3;
    int iterations = 5; // T
    double delta = 0.5;
    std::vector<double> delta_grid; // non-empty enables grid search
    int svgd_iterations = 1000;
    double svgd_step_size = 0.1;
    int score_cap = 1024;
    std::string combiner = "probs"; // probs | logits
};

struct EvalConfig {
    int retrain_epochs = 30;
    int retrain_batch_size = 64;
    double retrain_lr = 0.05;
    double attack_eps = 0.01;
    double pgd_step = 0.008;
    int pgd_iters = 40;
    int estimation_sample = 8; // extra random archs for estimation quality
};

// Full run configuration: a TOML file plus CLI-flag overrides. The master
// seed is mandatory; no phase draws entropy from anywhere else.
struct RunConfig {
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::filesystem::path out;

    DatasetConfig dataset;
    SpaceConfig space;
    TrainConfig supernet;
    PosteriorConfig posterior;
    SamplerConfig sampler;
    EvalConfig eval;

    SearchSpace make_space() const {
        return SearchSpace{space.depth, OpSet::from_names(space.opset)};
    }

    void validate() const {
        if (!seed_set) throw ConfigError("master seed is required (set seed= or pass --seed)");
        if (out.empty()) throw ConfigError("output directory is required (set out= or pass --out)");
        method_from_name(sampler.method);
        estimator_from_name(posterior.estimator);
        if (sampler.combiner != "probs" && sampler.combiner != "logits")
            throw ConfigError("combiner must be 'probs' or 'logits'");
        if (space.depth < 1) throw ConfigError("space depth must be >= 1");
        OpSet::from_names(space.opset);
    }

    // Canonical TOML: round-trips through the parser and is the hashing input.
    toml::Table to_table() const {
        toml::Table t;
        t["seed"] = toml::Value{static_cast<std::int64_t>(seed)};
        t["out"] = toml::Value{out.string()};
        t["dataset.kind"] = toml::Value{dataset.kind};
        t["dataset.n"] = toml::Value{static_cast<std::int64_t>(dataset.n)};
        t["dataset.test_n"] = toml::Value{static_cast<std::int64_t>(dataset.test_n)};
        t["dataset.subpopulations"] = toml::Value{static_cast<std::int64_t>(dataset.subpopulations)};
        t["dataset.label_noise"] = toml::Value{dataset.label_noise};
        t["dataset.split_fraction"] = toml::Value{dataset.split_fraction};
        t["dataset.images"] = toml::Value{dataset.images};
        t["dataset.labels"] = toml::Value{dataset.labels};
        t["dataset.test_images"] = toml::Value{dataset.test_images};
        t["dataset.test_labels"] = toml::Value{dataset.test_labels};
        toml::Array ops;
        for (const auto& o : space.opset) ops.push_back(toml::Value{o});
        t["space.depth"] = toml::Value{static_cast<std::int64_t>(space.depth)};
        t["space.opset"] = toml::Value{ops};
        t["space.hidden"] = toml::Value{static_cast<std::int64_t>(space.hidden)};
        t["supernet.epochs"] = toml::Value{static_cast<std::int64_t>(supernet.epochs)};
        t["supernet.batch_size"] = toml::Value{static_cast<std::int64_t>(supernet.batch_size)};
        t["supernet.lr"] = toml::Value{supernet.lr};
        t["supernet.momentum"] = toml::Value{supernet.momentum};
        t["supernet.weight_decay"] = toml::Value{supernet.weight_decay};
        t["posterior.estimator"] = toml::Value{posterior.estimator};
        t["posterior.tau"] = toml::Value{posterior.tau};
        t["posterior.epochs"] = toml::Value{static_cast<std::int64_t>(posterior.epochs)};
        t["posterior.lr"] = toml::Value{posterior.lr};
        t["posterior.batch_size"] = toml::Value{static_cast<std::int64_t>(posterior.batch_size)};
        t["posterior.steps_per_epoch"] =
            toml::Value{static_cast<std::int64_t>(posterior.steps_per_epoch)};
        t["posterior.gumbel_temp"] = toml::Value{posterior.gumbel_temp};
        t["posterior.likelihood_scale"] = toml::Value{posterior.likelihood_scale};
        t["posterior.scale_cap"] = toml::Value{static_cast<std::int64_t>(posterior.scale_cap)};
        t["sampler.method"] = toml::Value{sampler.method};
        t["sampler.ensemble_size"] = toml::Value{static_cast<std::int64_t>(sampler.ensemble_size)};
        t["sampler.iterations"] = toml::Value{static_cast<std::int64_t>(sampler.iterations)};
        t["sampler.delta"] = toml::Value{sampler.delta};
        toml::Array grid;
        for (double d : sampler.delta_grid) grid.push_back(toml::Value{d});
        t["sampler.delta_grid"] = toml::Value{grid};
        t["sampler.svgd_iterations"] =
            toml::Value{static_cast<std::int64_t>(sampler.svgd_iterations)};
        t["sampler.svgd_step_size"] = toml::Value{sampler.svgd_step_size};
        t["sampler.score_cap"] = toml::Value{static_cast<std::int64_t>(sampler.score_cap)};
        t["sampler.combiner"] = toml::Value{sampler.combiner};
        t["eval.retrain_epochs"] = toml::Value{static_cast<std::int64_t>(eval.retrain_epochs)};
        t["eval.retrain_batch_size"] =
            toml::Value{static_cast<std::int64_t>(eval.retrain_batch_size)};
        t["eval.retrain_lr"] = toml::Value{eval.retrain_lr};
        t["eval.attack_eps"] = toml::Value{eval.attack_eps};
        t["eval.pgd_step"] = toml::Value{eval.pgd_step};
        t["eval.pgd_iters"] = toml::Value{static_cast<std::int64_t>(eval.pgd_iters)};
        t["eval.estimation_sample"] =
            toml::Value{static_cast<std::int64_t>(eval.estimation_sample)};
        return t;
    }

    std::string to_toml() const { return toml::serialize(to_table()); }

    // Hash excludes the output path: relocating a run directory must not
    // invalidate its artifacts.
    std::string config_hash() const {
        toml::Table t = to_table();
        t.erase("out");
        return sha256_hex(toml::serialize(t));
    }

    static RunConfig from_table(const toml::Table& t) {
        RunConfig c;
        auto get = [&](const char* key) -> const toml::Value* {
            auto it = t.find(key);
            return it == t.end() ? nullptr : &it->second;
        };
        auto num = [&](const char* key, double& slot) {
            if (const auto* v = get(key)) slot = v->as_number();
        };
        auto integer = [&](const char* key, int& slot) {
            if (const auto* v = get(key)) slot = static_cast<int>(v->as_int());
        };
        auto str = [&](const char* key, std::string& slot) {
            if (const auto* v = get(key)) slot = v->as_string();
        };
        if (const auto* v = get("seed")) {
            c.seed = static_cast<std::uint64_t>(v->as_int());
            c.seed_set = true;
        }
        if (const auto* v = get("out")) c.out = v->as_string();
        str("dataset.kind", c.dataset.kind);
        integer("dataset.n", c.dataset.n);
        integer("dataset.test_n", c.dataset.test_n);
        integer("dataset.subpopulations", c.dataset.subpopulations);
        num("dataset.label_noise", c.dataset.label_noise);
        num("dataset.split_fraction", c.dataset.split_fraction);
        str("dataset.images", c.dataset.images);
        str("dataset.labels", c.dataset.labels);
        str("dataset.test_images", c.dataset.test_images);
        str("dataset.test_labels", c.dataset.test_labels);
        integer("space.depth", c.space.depth);
        if (const auto* v = get("space.opset")) {
            c.space.opset.clear();
            for (const auto& e : v->as_array()) c.space.opset.push_back(e.as_string());
        }
        integer("space.hidden", c.space.hidden);
        integer("supernet.epochs", c.supernet.epochs);
        integer("supernet.batch_size", c.supernet.batch_size);
        num("supernet.lr", c.supernet.lr);
        num("supernet.momentum", c.supernet.momentum);
        num("supernet.weight_decay", c.supernet.weight_decay);
        str("posterior.estimator", c.posterior.estimator);
        num("posterior.tau", c.posterior.tau);
        integer("posterior.epochs", c.posterior.epochs);
        num("posterior.lr", c.posterior.lr);
        integer("posterior.batch_size", c.posterior.batch_size);
        integer("posterior.steps_per_epoch", c.posterior.steps_per_epoch);
        num("posterior.gumbel_temp", c.posterior.gumbel_temp);
        num("posterior.likelihood_scale", c.posterior.likelihood_scale);
        integer("posterior.scale_cap", c.posterior.scale_cap);
        str("sampler.method", c.sampler.method);
        integer("sampler.ensemble_size", c.sampler.ensemble_size);
        integer("sampler.iterations", c.sampler.iterations);
        num("sampler.delta", c.sampler.delta);
        if (const auto* v = get("sampler.delta_grid")) {
            c.sampler.delta_grid.clear();
            for (const auto& e : v->as_array()) c.sampler.delta_grid.push_back(e.as_number());
        }
        integer("sampler.svgd_iterations", c.sampler.svgd_iterations);
        num("sampler.svgd_step_size", c.sampler.svgd_step_size);
        integer("sampler.score_cap", c.sampler.score_cap);
        str("sampler.combiner", c.sampler.combiner);
        integer("eval.retrain_epochs", c.eval.retrain_epochs);
        integer("eval.retrain_batch_size", c.eval.retrain_batch_size);
        num("eval.retrain_lr", c.eval.retrain_lr);
        num("eval.attack_eps", c.eval.attack_eps);
        num("eval.pgd_step", c.eval.pgd_step);
        integer("eval.pgd_iters", c.eval.pgd_iters);
        integer("eval.estimation_sample", c.eval.estimation_sample);
        return c;
    }

    static RunConfig from_toml(const std::string& text) {
        return from_table(toml::parse(text));
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        return from_toml(buf.str());
    }
};

} // namespace nesbs
