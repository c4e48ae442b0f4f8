#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nesbs/config.hpp"
#include "nesbs/data.hpp"
#include "nesbs/enssearch.hpp"
#include "nesbs/error.hpp"
#include "nesbs/evalkit.hpp"
#include "nesbs/posterior.hpp"
#include "nesbs/samplers.hpp"
#include "nesbs/searchspace.hpp"
#include "nesbs/supertrain.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace nesbs {

inline constexpr const char* kToolVersion = "0.1.0";

// -- run directory manifest -------------------------------------------------------

// Tracks the config hash and the artifacts each completed phase produced.
// Downstream phases refuse to run against artifacts from a different config.
class RunManifest {
public:
    std::string config_hash;
    std::string tool_version = kToolVersion;
    nlohmann::ordered_json phases = nlohmann::ordered_json::object();

    static std::filesystem::path path_in(const std::filesystem::path& dir) {
        return dir / "manifest.json";
    }

    static RunManifest load_or_create(const std::filesystem::path& dir,
                                      const std::string& config_hash) {
        RunManifest m;
        const auto p = path_in(dir);
        if (std::filesystem::exists(p)) {
            std::ifstream in(p);
            nlohmann::json j = nlohmann::json::parse(in);
            m.config_hash = j.value("config_hash", "");
            m.tool_version = j.value("tool_version", kToolVersion);
            m.phases = j.value("phases", nlohmann::ordered_json::object());
            if (m.config_hash != config_hash)
                throw StalenessError("run directory " + dir.string() +
                                     " was produced under a different configuration; use a fresh "
                                     "--out or matching config");
        } else {
            m.config_hash = config_hash;
        }
        return m;
    }

    void record_phase(const std::string& phase,
                      const std::map<std::string, std::string>& artifacts) {
        nlohmann::ordered_json entry;
        const std::time_t now = std::time(nullptr);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        entry["timestamp"] = buf;
        entry["artifacts"] = artifacts;
        phases[phase] = entry;
    }

    void save(const std::filesystem::path& dir) const {
        nlohmann::ordered_json j;
        j["config_hash"] = config_hash;
        j["tool_version"] = tool_version;
        j["phases"] = phases;
        std::ofstream out(path_in(dir), std::ios::trunc);
        if (!out) throw IoError("cannot write manifest in " + dir.string());
        out << j.dump(2) << "\n";
    }

    std::filesystem::path require_artifact(const std::filesystem::path& dir,
                                           const std::string& phase, const std::string& name,
                                           const std::string& command_hint) const {
        if (!phases.contains(phase) || !phases[phase]["artifacts"].contains(name))
            throw PrerequisiteError("missing artifact '" + name + "' from phase '" + phase +
                                    "'; run `nesbs " + command_hint + "` first");
        std::filesystem::path p = dir / phases[phase]["artifacts"][name].get<std::string>();
        if (!std::filesystem::exists(p))
            throw PrerequisiteError("artifact path " + p.string() + " is missing; rerun `nesbs " +
                                    command_hint + "`");
        return p;
    }
};

// Rejects concurrent invocations on one output directory.
class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
        std::filesystem::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw ConfigError("output directory " + dir.string() +
                              " is locked by another invocation (stale? remove " + path_.string() +
                              ")");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

// -- dataset plumbing ----------------------------------------------------------------

inline Dataset build_train_dataset(const RunConfig& cfg) {
    if (cfg.dataset.kind == "idx") {
        if (cfg.dataset.images.empty() || cfg.dataset.labels.empty())
            throw ConfigError("idx dataset needs dataset.images and dataset.labels");
        return load_idx(cfg.dataset.images, cfg.dataset.labels);
    }
    return make_synthetic(cfg.dataset.kind, cfg.dataset.n, derive_seed(cfg.seed, "dataset"),
                          {cfg.dataset.subpopulations, cfg.dataset.label_noise});
}

inline Dataset build_test_dataset(const RunConfig& cfg) {
    if (cfg.dataset.kind == "idx") {
        if (cfg.dataset.test_images.empty() || cfg.dataset.test_labels.empty())
            throw ConfigError("idx evaluation needs dataset.test_images and dataset.test_labels");
        return load_idx(cfg.dataset.test_images, cfg.dataset.test_labels);
    }
    return make_synthetic(cfg.dataset.kind, cfg.dataset.test_n,
                          derive_seed(cfg.seed, "dataset-test"),
                          {cfg.dataset.subpopulations, cfg.dataset.label_noise});
}

inline SearchSplit build_split(const RunConfig& cfg, const Dataset& data) {
    return split(data, cfg.dataset.split_fraction, derive_seed(cfg.seed, "split"));
}

// -- phases -----------------------------------------------------------------------------

namespace phase {

inline void train_supernet(const RunConfig& cfg, RunManifest& manifest) {
    Dataset data = build_train_dataset(cfg);
    SearchSplit sp = build_split(cfg, data);
    Supernet net(cfg.make_space(), data.features(), cfg.space.hidden, data.num_classes,
                 derive_seed(cfg.seed, "supernet-init"));
    TrainConfig tcfg = cfg.supernet;
    tcfg.seed = derive_seed(cfg.seed, "supernet-train");
    TrainLog log = train(net, sp.supernet_train, tcfg);

    net.save(cfg.out / "supernet");
    {
        std::ofstream csv(cfg.out / "train_log.csv", std::ios::trunc);
        log.write_csv(csv);
    }
    {
        FairnessReport fair = fairness_report(net.visit_ledger, net.space);
        nlohmann::ordered_json j;
        j["total_steps"] = fair.total_steps;
        j["max_arch_deviation"] = fair.max_arch_deviation;
        j["max_slot_deviation"] = fair.max_slot_deviation;
        j["chi_square"] = fair.chi_square;
        j["epsilon"] = fair.epsilon;
        j["pass"] = fair.pass;
        j["slot_op_freq"] = fair.slot_op_freq;
        std::ofstream out(cfg.out / "fairness.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    manifest.record_phase("train-supernet", {{"supernet", "supernet"},
                                             {"train_log", "train_log.csv"},
                                             {"fairness", "fairness.json"}});
}

inline void fit_posterior(const RunConfig& cfg, RunManifest& manifest) {
    const auto ckpt =
        manifest.require_artifact(cfg.out, "train-supernet", "supernet", "train-supernet");
    Supernet net = Supernet::load(ckpt);
    Dataset data = build_train_dataset(cfg);
    SearchSplit sp = build_split(cfg, data);

    FitConfig fcfg;
    fcfg.estimator = estimator_from_name(cfg.posterior.estimator);
    fcfg.epochs = cfg.posterior.epochs;
    fcfg.lr = cfg.posterior.lr;
    fcfg.batch_size = cfg.posterior.batch_size;
    fcfg.steps_per_epoch = cfg.posterior.steps_per_epoch;
    fcfg.gumbel_temp = cfg.posterior.gumbel_temp;
    fcfg.likelihood_scale = cfg.posterior.likelihood_scale;
    fcfg.scale_cap = cfg.posterior.scale_cap;
    fcfg.seed = derive_seed(cfg.seed, "posterior");

    FitResult res = fit(ArchPosterior::uniform(net.space, cfg.posterior.tau), net,
                        sp.posterior_val, fcfg);
    save_posterior(res.posterior, net.space.opset, cfg.out / "posterior.json");
    {
        std::ofstream csv(cfg.out / "elbo_trace.csv", std::ios::trunc);
        csv << "epoch,elbo\n";
        for (std::size_t e = 0; e < res.elbo_trace.size(); ++e)
            csv << e << "," << res.elbo_trace[e] << "\n";
    }
    manifest.record_phase("fit-posterior",
                          {{"posterior", "posterior.json"}, {"elbo_trace", "elbo_trace.csv"}});
}

inline void run_search(const RunConfig& cfg, RunManifest& manifest) {
    const auto ckpt =
        manifest.require_artifact(cfg.out, "train-supernet", "supernet", "train-supernet");
    const auto post_path =
        manifest.require_artifact(cfg.out, "fit-posterior", "posterior", "fit-posterior");
    Supernet net = Supernet::load(ckpt);
    ArchPosterior post = load_posterior(post_path);
    Dataset data = build_train_dataset(cfg);
    SearchSplit sp = build_split(cfg, data);

    SearchConfig scfg;
    scfg.method = method_from_name(cfg.sampler.method);
    scfg.iterations = cfg.sampler.iterations;
    scfg.ensemble_size = cfg.sampler.ensemble_size;
    scfg.delta = cfg.sampler.delta;
    scfg.svgd_iterations = cfg.sampler.svgd_iterations;
    scfg.svgd_step_size = cfg.sampler.svgd_step_size;
    scfg.score_cap = cfg.sampler.score_cap;
    scfg.combiner = cfg.sampler.combiner == "logits" ? Combiner::Logits : Combiner::Probabilities;

    nlohmann::ordered_json result_json;
    std::map<std::string, std::string> artifacts{{"search_result", "search_result.json"}};
    if (scfg.method == SearchMethod::SvgdRd && !cfg.sampler.delta_grid.empty()) {
        DeltaGridResult grid = delta_grid_search(net, post, sp.posterior_val,
                                                 cfg.sampler.delta_grid, scfg,
                                                 derive_seed(cfg.seed, "search"));
        result_json = search_result_json(grid.best, scfg.method, scfg.iterations,
                                         scfg.ensemble_size, grid.best_delta);
        std::ofstream csv(cfg.out / "delta_grid.csv", std::ios::trunc);
        csv << "delta,best_loss\n";
        for (const auto& [delta, res] : grid.per_delta)
            csv << delta << "," << res.winner.loss << "\n";
        artifacts["delta_grid"] = "delta_grid.csv";
    } else {
        Rng rng = derive_rng(cfg.seed, "search");
        SearchResult res = search(net, post, sp.posterior_val, scfg, rng);
        result_json = search_result_json(
            res, scfg.method, scfg.iterations, scfg.ensemble_size,
            scfg.method == SearchMethod::SvgdRd ? std::optional<double>(scfg.delta) : std::nullopt);
    }
    std::ofstream out(cfg.out / "search_result.json", std::ios::trunc);
    out << result_json.dump(2) << "\n";
    manifest.record_phase("search", artifacts);
}

inline std::vector<ArchitectureId> winner_members(const std::filesystem::path& result_path) {
    std::ifstream in(result_path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::vector<ArchitectureId> members;
    for (const auto& m : j.at("winner").at("members"))
        members.push_back(ArchitectureId{m.get<std::vector<int>>()});
    return members;
}

inline void evaluate(const RunConfig& cfg, RunManifest& manifest) {
    const auto ckpt =
        manifest.require_artifact(cfg.out, "train-supernet", "supernet", "train-supernet");
    const auto result_path = manifest.require_artifact(cfg.out, "search", "search_result", "search");
    Supernet net = Supernet::load(ckpt);
    const std::vector<ArchitectureId> members = winner_members(result_path);

    Dataset train_data = build_train_dataset(cfg);
    Dataset test_data = build_test_dataset(cfg);
    SearchSplit sp = build_split(cfg, train_data);

    TrainConfig rcfg;
    rcfg.epochs = cfg.eval.retrain_epochs;
    rcfg.batch_size = cfg.eval.retrain_batch_size;
    rcfg.lr = cfg.eval.retrain_lr;
    std::vector<StandaloneNet> models = retrain_members(members, net.space, cfg.space.hidden,
                                                        train_data, rcfg,
                                                        derive_seed(cfg.seed, "retrain"));

    EvalReport rep = evaluate_ensemble(models, test_data);
    nlohmann::ordered_json j = eval_report_json(rep);
    j["members"] = members_json(members);

    // estimation quality: shared-weight estimates vs independently retrained
    // losses over the winner members plus uniformly sampled extras
    {
        std::set<ArchitectureId> archs(members.begin(), members.end());
        Rng rng = derive_rng(cfg.seed, "estimation");
        const std::uint64_t target =
            std::min<std::uint64_t>(members.size() + cfg.eval.estimation_sample, net.space.size());
        while (archs.size() < target) archs.insert(net.space.sample_uniform(rng));
        const Dataset score_data = sp.posterior_val;
        std::vector<double> estimated, truth;
        std::uint64_t idx = 0;
        for (const auto& arch : archs) {
            estimated.push_back(arch_mean_cross_entropy(net, arch, score_data));
            StandaloneNet solo(net.space, arch, train_data.features(), cfg.space.hidden,
                               train_data.num_classes,
                               derive_seed(cfg.seed, "estimation/init/" + std::to_string(idx)));
            TrainConfig icfg = rcfg;
            icfg.seed = derive_seed(cfg.seed, "estimation/train/" + std::to_string(idx));
            train_standalone(solo, train_data, icfg);
            truth.push_back(standalone_cross_entropy(solo, test_data));
            ++idx;
        }
        EstimationQuality q = estimation_quality(estimated, truth);
        j["estimation_quality"] = {{"spearman", q.spearman},
                                   {"pearson", q.pearson},
                                   {"agreement_at_k", q.agreement_at_k},
                                   {"k", q.k},
                                   {"estimated", estimated},
                                   {"true", truth},
                                   {"provenance", "estimated-with-shared-weights vs independently-retrained"}};
    }

    std::ofstream out(cfg.out / "eval_report.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    {
        std::ofstream csv(cfg.out / "predictions.csv", std::ios::trunc);
        write_prediction_csv(csv, models, test_data);
    }
    for (std::size_t i = 0; i < models.size(); ++i)
        models[i].save(cfg.out / "retrained" / ("member" + std::to_string(i)));
    manifest.record_phase("evaluate", {{"eval_report", "eval_report.json"},
                                       {"predictions", "predictions.csv"},
                                       {"retrained", "retrained"}});
}

inline void attack_eval(const RunConfig& cfg, RunManifest& manifest) {
    const auto retrained_dir =
        manifest.require_artifact(cfg.out, "evaluate", "retrained", "evaluate");
    std::vector<StandaloneNet> models;
    for (int i = 0;; ++i) {
        const auto dir = retrained_dir / ("member" + std::to_string(i));
        if (!std::filesystem::exists(dir)) break;
        models.push_back(StandaloneNet::load(dir));
    }
    if (models.size() < 2)
        throw PrerequisiteError("attack-eval needs at least two retrained members; rerun `nesbs "
                                "evaluate` with ensemble_size >= 2");
    Dataset test_data = build_test_dataset(cfg);

    AttackParams params;
    params.eps = cfg.eval.attack_eps;
    params.pgd_step = cfg.eval.pgd_step;
    params.pgd_iters = cfg.eval.pgd_iters;
    nlohmann::ordered_json j;
    j["fgsm"] = attack_report_json(
        attack_defense_protocol(models, test_data, AttackKind::Fgsm, params));
    j["pgd"] =
        attack_report_json(attack_defense_protocol(models, test_data, AttackKind::Pgd, params));
    std::ofstream out(cfg.out / "attack_report.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    manifest.record_phase("attack-eval", {{"attack_report", "attack_report.json"}});
}

// Two-mode mixture runs across a delta list with the caption settings
// (L=1000, n=15, eps=0.1, plain steps, RBF kernel). Bandwidth is fixed at
// 0.3: the recomputed median heuristic feeds back into itself at large delta
// (spread grows the bandwidth, which grows the repulsion range) and scatters
// particles into low-density regions; any fixed h in [0.25, 0.35] keeps every
// particle above 10% of the mixture's max density across the delta sweep.
inline constexpr double kTwoModeBandwidth = 0.3;

inline void repro_fig2(const std::vector<double>& deltas, std::uint64_t seed,
                       const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    const TargetDensity target = make_two_mode_target();
    const double log_max = grid_max_density(target, -4.0, 4.0, 200);

    std::ofstream summary(out_dir / "fig2_summary.csv", std::ios::trunc);
    summary << "delta,mean_pairwise_distance,high_density_fraction\n";
    for (std::size_t gi = 0; gi < deltas.size(); ++gi) {
        SvgdConfig cfg;
        cfg.particles = 15;
        cfg.iterations = 1000;
        cfg.step_size = 0.1;
        cfg.delta = deltas[gi];
        cfg.use_momentum = false;
        cfg.fixed_bandwidth = kTwoModeBandwidth;
        Rng rng = derive_rng(seed, "fig2/" + std::to_string(gi));
        SvgdRun run = run_svgd_rd(cfg, target, rng);

        std::ostringstream name;
        name << "trajectory_delta_" << deltas[gi] << ".csv";
        std::ofstream traj(out_dir / name.str(), std::ios::trunc);
        write_trajectory_csv(traj, run);

        int high = 0;
        for (const auto& p : run.particles)
            high += target.log_density_grad(p.x).log_p >= log_max + std::log(0.1);
        summary << deltas[gi] << "," << mean_pairwise_distance(run.particles) << ","
                << static_cast<double>(high) / static_cast<double>(run.particles.size()) << "\n";
    }
}

} // namespace phase

// -- command driver -----------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"neural ensemble search over a weight-sharing supernet"};
    app.require_subcommand(1);

    std::string config_path, out_dir, method, delta_grid_csv, deltas_csv = "-0.5,0.5,5.0";
    std::uint64_t seed = 0;
    bool seed_given = false;
    double delta = std::numeric_limits<double>::quiet_NaN();
    int ensemble_size = 0, iterations = 0;
    const auto mark_seed = [&seed_given](const std::string&) { seed_given = true; };

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "TOML config file");
        cmd->add_option("--seed", seed, "master seed (required here or in the config)")
            ->each(mark_seed);
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--method", method, "sampler: mc | svgd-rd | urs");
        cmd->add_option("--delta", delta, "diversity coefficient");
        cmd->add_option("--delta-grid", delta_grid_csv, "comma-separated delta grid");
        cmd->add_option("--ensemble-size", ensemble_size, "ensemble size n");
        cmd->add_option("--iterations", iterations, "search iterations T");
    };

    CLI::App* c_train = app.add_subcommand("train-supernet", "fair supernet training");
    CLI::App* c_fit = app.add_subcommand("fit-posterior", "variational posterior fitting");
    CLI::App* c_search = app.add_subcommand("search", "ensemble selection");
    CLI::App* c_eval = app.add_subcommand("evaluate", "retrain winners and report metrics");
    CLI::App* c_attack = app.add_subcommand("attack-eval", "attack/defense protocol");
    CLI::App* c_pipe = app.add_subcommand("pipeline", "all phases in order");
    for (CLI::App* cmd : {c_train, c_fit, c_search, c_eval, c_attack, c_pipe}) add_common(cmd);
    CLI::App* c_fig2 = app.add_subcommand("repro-fig2", "two-mode diversity sweep CSVs");
    c_fig2->add_option("--deltas", deltas_csv, "comma-separated delta list");
    c_fig2->add_option("--seed", seed, "master seed")->each(mark_seed);
    c_fig2->add_option("--out", out_dir, "output directory");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            // --help
            out << app.help() << std::flush;
            return 0;
        }
        err << "error: " << e.what() << "\n";
        return 2;
    }

    auto parse_csv_doubles = [](const std::string& csv) {
        std::vector<double> out_values;
        std::istringstream is(csv);
        std::string tok;
        while (std::getline(is, tok, ','))
            if (!tok.empty()) out_values.push_back(std::stod(tok));
        return out_values;
    };

    // the single supported environment variable: relative output directories
    // are resolved under NESBS_OUT_ROOT when it is set
    auto resolve_out = [](std::filesystem::path p) {
        const char* root = std::getenv("NESBS_OUT_ROOT");
        if (root != nullptr && *root != '\0' && !p.empty() && p.is_relative())
            return std::filesystem::path(root) / p;
        return p;
    };

    try {
        if (c_fig2->parsed()) {
            if (out_dir.empty()) throw ConfigError("repro-fig2 needs --out");
            const std::uint64_t fig_seed = seed_given ? seed : 0;
            const std::filesystem::path fig_out = resolve_out(out_dir);
            DirLock lock(fig_out);
            phase::repro_fig2(parse_csv_doubles(deltas_csv), fig_seed, fig_out);
            out << "wrote fig2 summary to " << fig_out.string() << "\n";
            return 0;
        }

        RunConfig cfg;
        if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
        if (seed_given) {
            cfg.seed = seed;
            cfg.seed_set = true;
        }
        if (!out_dir.empty()) cfg.out = out_dir;
        if (!method.empty()) cfg.sampler.method = method;
        if (!std::isnan(delta)) cfg.sampler.delta = delta;
        if (!delta_grid_csv.empty()) cfg.sampler.delta_grid = parse_csv_doubles(delta_grid_csv);
        if (ensemble_size > 0) cfg.sampler.ensemble_size = ensemble_size;
        if (iterations > 0) cfg.sampler.iterations = iterations;
        cfg.out = resolve_out(cfg.out);
        cfg.validate();

        DirLock lock(cfg.out);
        RunManifest manifest = RunManifest::load_or_create(cfg.out, cfg.config_hash());
        auto finish = [&](const char* what) {
            manifest.save(cfg.out);
            out << what << " done; artifacts in " << cfg.out.string() << "\n";
        };

        if (c_train->parsed()) {
            phase::train_supernet(cfg, manifest);
            finish("train-supernet");
        } else if (c_fit->parsed()) {
            phase::fit_posterior(cfg, manifest);
            finish("fit-posterior");
        } else if (c_search->parsed()) {
            phase::run_search(cfg, manifest);
            finish("search");
        } else if (c_eval->parsed()) {
            phase::evaluate(cfg, manifest);
            finish("evaluate");
        } else if (c_attack->parsed()) {
            phase::attack_eval(cfg, manifest);
            finish("attack-eval");
        } else if (c_pipe->parsed()) {
            phase::train_supernet(cfg, manifest);
            phase::fit_posterior(cfg, manifest);
            phase::run_search(cfg, manifest);
            phase::evaluate(cfg, manifest);
            phase::attack_eval(cfg, manifest);
            finish("pipeline");
        }
        return 0;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace nesbs
