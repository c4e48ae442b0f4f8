#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "nesbs/data.hpp"
#include "nesbs/error.hpp"
#include "nesbs/posterior.hpp"
#include "nesbs/samplers.hpp"
#include "nesbs/searchspace.hpp"

#include <nlohmann/json.hpp>

namespace nesbs {

enum class SearchMethod { Mc, SvgdRd, Urs };

inline const char* method_name(SearchMethod m) {
    switch (m) {
    case SearchMethod::Mc: return "mc";
    case SearchMethod::SvgdRd: return "svgd-rd";
    default: return "urs";
    }
}

inline SearchMethod method_from_name(const std::string& s) {
    if (s == "mc") return SearchMethod::Mc;
    if (s == "svgd-rd") return SearchMethod::SvgdRd;
    if (s == "urs") return SearchMethod::Urs;
    throw ConfigError("unknown search method: " + s);
}

enum class Combiner { Probabilities, Logits };

// Mean class-probability of the ensemble members (probability averaging keeps
// the Jensen bound exact; logit averaging sits behind the config switch).
inline Tensor ensemble_predict(Supernet& net, const std::vector<ArchitectureId>& members,
                               const Tensor& batch, Combiner combiner = Combiner::Probabilities) {
    if (members.empty()) throw ContractError("ensemble has no members");
    Tensor acc;
    for (const auto& member : members) {
        Tensor logits = net.logits(member, batch);
        if (combiner == Combiner::Probabilities) logits = softmax_rows(logits);
        if (acc.values.empty())
            acc = logits;
        else
            for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += logits.values[i];
    }
    for (double& v : acc.values) v /= static_cast<double>(members.size());
    if (combiner == Combiner::Logits) acc = softmax_rows(acc);
    return acc;
}

// Cross-entropy of the averaged probabilities at the true labels.
inline double estimate_ensemble_loss(Supernet& net, const std::vector<ArchitectureId>& members,
                                     const Dataset& data,
                                     Combiner combiner = Combiner::Probabilities) {
    if (data.size() == 0) throw ConfigError("validation subset is empty");
    Tensor probs = ensemble_predict(net, members, data.inputs, combiner);
    double loss = 0.0;
    for (int i = 0; i < data.size(); ++i)
        loss -= std::log(probs.at(i, data.labels[static_cast<std::size_t>(i)]));
    return loss / data.size();
}

struct EnsembleCandidate {
    std::vector<ArchitectureId> members;
    double loss = 0.0;
    int iteration = 0;
    std::string sampler; // "mc" | "svgd-rd(<delta>)" | "urs"
};

struct SearchResult {
    EnsembleCandidate winner;
    std::vector<EnsembleCandidate> log;
    double sampling_ms = 0.0;
    double scoring_ms = 0.0;
};

struct SearchConfig {
    SearchMethod method = SearchMethod::Mc;
    int iterations = 5;  // T
    int ensemble_size = 3; // n
    double delta = 0.5;
    int svgd_iterations = 1000;
    double svgd_step_size = 0.1;
    bool svgd_momentum = true; // lr 0.1 with momentum 0.9 in architecture space
    int score_cap = 1024;      // seeded subsample for per-candidate scoring
    Combiner combiner = Combiner::Probabilities;

    void validate() const {
        if (iterations < 1) throw ConfigError("search needs T >= 1");
        if (ensemble_size < 1) throw ConfigError("search needs n >= 1");
    }
};

namespace detail {

inline Dataset score_subset(const Dataset& data, int cap, std::uint64_t seed) {
    if (data.size() <= cap) return data;
    std::vector<int> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(static_cast<std::size_t>(cap));
    return data.take(order);
}

} // namespace detail

// The top-level search loop: T candidate ensembles sampled by the configured
// method, each scored with supernet-inherited weights on the validation
// subset, argmin returned with ties broken by earliest iteration.
inline SearchResult search(Supernet& net, const ArchPosterior& post, const Dataset& val,
                           const SearchConfig& cfg, Rng& rng) {
    cfg.validate();
    if (!net.frozen) throw StateError("search requires a frozen supernet");
    using clock = std::chrono::steady_clock;

    // fixed subsample seed: every method scores candidates on the same points
    const Dataset subset = detail::score_subset(val, cfg.score_cap, derive_seed(1024, "score-subset"));
    const ParticleLayout layout{net.space.depth, net.space.opset.size()};
    const TargetDensity target =
        cfg.method == SearchMethod::SvgdRd ? make_relaxed_density(post) : TargetDensity{};

    std::string tag = method_name(cfg.method);
    if (cfg.method == SearchMethod::SvgdRd)
        tag += "(" + std::to_string(cfg.delta) + ")";

    SearchResult result;
    for (int t = 0; t < cfg.iterations; ++t) {
        const auto t0 = clock::now();
        std::vector<ArchitectureId> members;
        switch (cfg.method) {
        case SearchMethod::Mc:
            members = mc_sample_ensemble(post, cfg.ensemble_size, rng);
            break;
        case SearchMethod::Urs:
            for (int i = 0; i < cfg.ensemble_size; ++i)
                members.push_back(net.space.sample_uniform(rng));
            break;
        case SearchMethod::SvgdRd: {
            SvgdConfig scfg;
            scfg.particles = cfg.ensemble_size;
            scfg.iterations = cfg.svgd_iterations;
            scfg.step_size = cfg.svgd_step_size;
            scfg.delta = cfg.delta;
            scfg.use_momentum = cfg.svgd_momentum;
            SvgdRun run = run_svgd_rd(scfg, target, rng, &layout);
            members = decode_particles(run.particles, layout);
            break;
        }
        }
        const auto t1 = clock::now();
        EnsembleCandidate cand;
        cand.members = std::move(members);
        cand.iteration = t;
        cand.sampler = tag;
        cand.loss = estimate_ensemble_loss(net, cand.members, subset, cfg.combiner);
        const auto t2 = clock::now();
        result.sampling_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.scoring_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
        if (result.log.empty() || cand.loss < result.winner.loss) result.winner = cand;
        result.log.push_back(std::move(cand));
    }
    return result;
}

struct DeltaGridResult {
    double best_delta = 0.0;
    SearchResult best;
    std::vector<std::pair<double, SearchResult>> per_delta;
};

inline std::vector<double> default_delta_grid() {
    return {-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0};
}

// Grid search over the diversity coefficient; every grid point gets its own
// stream derived from (seed, delta index).
inline DeltaGridResult delta_grid_search(Supernet& net, const ArchPosterior& post,
                                         const Dataset& val, const std::vector<double>& grid,
                                         SearchConfig cfg, std::uint64_t seed) {
    if (grid.empty()) throw ConfigError("delta grid is empty");
    cfg.method = SearchMethod::SvgdRd;
    DeltaGridResult out;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        cfg.delta = grid[gi];
        Rng rng = derive_rng(seed, "delta-grid/" + std::to_string(gi));
        SearchResult res = search(net, post, val, cfg, rng);
        if (out.per_delta.empty() || res.winner.loss < out.best.winner.loss) {
            out.best = res;
            out.best_delta = grid[gi];
        }
        out.per_delta.emplace_back(grid[gi], std::move(res));
    }
    return out;
}

// -- result JSON ----------------------------------------------------------------

inline nlohmann::ordered_json members_json(const std::vector<ArchitectureId>& members) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& m : members) arr.push_back(m.ops);
    return arr;
}

inline nlohmann::ordered_json search_result_json(const SearchResult& res, SearchMethod method,
                                                 int iterations, int ensemble_size,
                                                 std::optional<double> delta) {
    nlohmann::ordered_json j;
    j["method"] = method_name(method);
    j["T"] = iterations;
    j["n"] = ensemble_size;
    if (delta) j["delta"] = *delta;
    j["winner"] = {{"members", members_json(res.winner.members)}, {"loss", res.winner.loss}};
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    for (const auto& c : res.log)
        log.push_back({{"t", c.iteration}, {"members", members_json(c.members)}, {"loss", c.loss}});
    j["log"] = log;
    return j;
}

} // namespace nesbs
