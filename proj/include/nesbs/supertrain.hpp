#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "nesbs/data.hpp"
#include "nesbs/error.hpp"
#include "nesbs/searchspace.hpp"

namespace nesbs {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 64;
    double lr = 0.05; // cosine scheduled to 0
    double momentum = 0.9;
    double weight_decay = 3e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    }
};

// eta_t = eta0 * (1 + cos(pi t / T)) / 2: exactly eta0 at step 0, ~0 at the end.
inline double cosine_lr(double lr0, std::uint64_t step, std::uint64_t total_steps) {
    if (total_steps == 0) return lr0;
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                       static_cast<double>(total_steps)));
}

struct TrainStepRecord {
    std::uint64_t step;
    ArchitectureId arch;
    double loss;
    double lr;
};

struct TrainLog {
    std::vector<TrainStepRecord> steps;

    // CSV: step, sampled_arch (dash-joined indices), loss, lr
    void write_csv(std::ostream& out) const {
        out << "step,sampled_arch,loss,lr\n";
        for (const auto& r : steps)
            out << r.step << "," << r.arch.str() << "," << r.loss << "," << r.lr << "\n";
    }
};

// One fair training step: sample a single architecture uniformly, update only
// its path (selected banks plus the shared stem/head), and record the visit.
inline double train_step(Supernet& net, const Dataset& batch, Rng& rng, Optimizer& opt,
                         ArchitectureId* sampled = nullptr) {
    if (net.frozen) throw StateError("cannot train a frozen supernet");
    const ArchitectureId arch = net.space.sample_uniform(rng);
    if (sampled != nullptr) *sampled = arch;
    net.for_each_arch_param(arch, [](const std::string&, Tensor& t) {
        t.ensure_grad();
        t.zero_grad();
    });
    Tape tape;
    auto loss_node = activations_and_loss(tape, net.forward(tape, arch, batch.inputs),
                                          batch.labels);
    const double loss = tape.value(loss_node).values[0];
    if (!std::isfinite(loss))
        throw NumericError("non-finite training loss for arch " + arch.str() + " at step " +
                           std::to_string(net.step_count));
    tape.backward(loss_node);
    net.for_each_arch_param(arch, [&](const std::string& name, Tensor& t) { opt.step(name, t); });
    net.record_visit(arch);
    return loss;
}

// Full fair supernet training: seeded shuffling per epoch, cosine schedule,
// SGD with momentum. Freezes the supernet on completion.
inline TrainLog train(Supernet& net, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    const int n = data.size();
    const std::uint64_t steps_per_epoch =
        static_cast<std::uint64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
    const std::uint64_t total_steps = steps_per_epoch * static_cast<std::uint64_t>(cfg.epochs);

    Optimizer opt({OptimizerKind::SgdMomentum, cfg.lr, cfg.momentum, 0.999, cfg.weight_decay});
    Rng shuffle_rng = derive_rng(cfg.seed, "supertrain/shuffle");
    Rng arch_rng = derive_rng(cfg.seed, "supertrain/arch");

    TrainLog log;
    log.steps.reserve(static_cast<std::size_t>(total_steps));
    std::uint64_t step = 0;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t off = 0; off < static_cast<std::size_t>(n);
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(cfg.batch_size), static_cast<std::size_t>(n) - off);
            Dataset batch = data.batch(order, off, count);
            const double lr = cosine_lr(cfg.lr, step, total_steps);
            opt.set_lr(lr);
            ArchitectureId sampled;
            const double loss = train_step(net, batch, arch_rng, opt, &sampled);
            log.steps.push_back({step, std::move(sampled), loss, lr});
            ++step;
        }
    }
    net.freeze();
    return log;
}

// -- fairness -------------------------------------------------------------------

struct FairnessReport {
    std::uint64_t total_steps = 0;
    double max_arch_deviation = 0.0;       // max_i |T_i/T - 1/N|
    double chi_square = 0.0;               // over architectures
    std::vector<std::vector<double>> slot_op_freq; // [slot][op]
    double max_slot_deviation = 0.0;       // max over (slot, op) of |freq - 1/|O||
    double epsilon = 0.01;
    bool pass = false;
};

// Empirical check of uniform-path training fairness. Per-architecture counts
// are reported, but the pass criterion uses per-slot op frequencies, whose
// counts are large enough for a tight binomial bound. epsilon <= 0 selects
// the 4-sigma binomial bound at the observed step count (0.0094 at 40k steps
// with three ops).
inline FairnessReport fairness_report(const std::map<ArchitectureId, std::uint64_t>& ledger,
                                      const SearchSpace& space, double epsilon = 0.0) {
    FairnessReport rep;
    for (const auto& [arch, count] : ledger) rep.total_steps += count;
    if (rep.total_steps == 0) throw ContractError("fairness report needs at least one step");
    const double p = 1.0 / space.opset.size();
    rep.epsilon = epsilon > 0.0
                      ? epsilon
                      : 4.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(rep.total_steps));

    const double n_archs = static_cast<double>(space.size());
    const double expected = rep.total_steps / n_archs;
    std::uint64_t seen = 0;
    for (const auto& [arch, count] : ledger) {
        const double freq = static_cast<double>(count) / static_cast<double>(rep.total_steps);
        rep.max_arch_deviation = std::max(rep.max_arch_deviation, std::abs(freq - 1.0 / n_archs));
        const double d = static_cast<double>(count) - expected;
        rep.chi_square += d * d / expected;
        ++seen;
    }
    // unvisited architectures contribute their expected count to chi-square
    // and a deviation of exactly 1/N
    if (static_cast<double>(seen) < n_archs) {
        rep.chi_square += (n_archs - static_cast<double>(seen)) * expected;
        rep.max_arch_deviation = std::max(rep.max_arch_deviation, 1.0 / n_archs);
    }

    rep.slot_op_freq.assign(static_cast<std::size_t>(space.depth),
                            std::vector<double>(static_cast<std::size_t>(space.opset.size()), 0.0));
    for (const auto& [arch, count] : ledger)
        for (int s = 0; s < space.depth; ++s)
            rep.slot_op_freq[static_cast<std::size_t>(s)]
                            [static_cast<std::size_t>(arch.ops[static_cast<std::size_t>(s)])] +=
                static_cast<double>(count);
    const double uniform = 1.0 / space.opset.size();
    for (auto& row : rep.slot_op_freq)
        for (double& f : row) {
            f /= static_cast<double>(rep.total_steps);
            rep.max_slot_deviation = std::max(rep.max_slot_deviation, std::abs(f - uniform));
        }
    rep.pass = rep.max_slot_deviation < rep.epsilon;
    return rep;
}

} // namespace nesbs
