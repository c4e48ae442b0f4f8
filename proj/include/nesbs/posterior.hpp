#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nesbs/data.hpp"
#include "nesbs/error.hpp"
#include "nesbs/searchspace.hpp"

#include <nlohmann/json.hpp>

namespace nesbs {

// Factorized categorical posterior over architectures: a DxO matrix of
// unnormalized logits alpha with softmax temperature tau. Slot distributions
// are p_i = softmax(alpha_i / tau), and p(A) is their product.
struct ArchPosterior {
    int depth = 0;
    int num_ops = 0;
    double tau = 1.0;
    std::vector<double> alpha; // row-major D x O

    static ArchPosterior uniform(const SearchSpace& space, double tau = 1.0) {
        ArchPosterior p;
        p.depth = space.depth;
        p.num_ops = space.opset.size();
        p.tau = tau;
        p.alpha.assign(static_cast<std::size_t>(p.depth) * p.num_ops, 0.0);
        return p;
    }

    double logit(int slot, int op) const {
        return alpha[static_cast<std::size_t>(slot) * num_ops + op];
    }

    std::vector<double> slot_log_probs(int slot) const {
        std::vector<double> z(static_cast<std::size_t>(num_ops));
        double m = -std::numeric_limits<double>::infinity();
        for (int o = 0; o < num_ops; ++o) {
            z[static_cast<std::size_t>(o)] = logit(slot, o) / tau;
            m = std::max(m, z[static_cast<std::size_t>(o)]);
        }
        double lse = 0.0;
        for (double v : z) lse += std::exp(v - m);
        lse = m + std::log(lse);
        for (double& v : z) v -= lse;
        return z;
    }

    std::vector<double> slot_probs(int slot) const {
        std::vector<double> p = slot_log_probs(slot);
        for (double& v : p) v = std::exp(v);
        return p;
    }

    double log_prob(const ArchitectureId& arch) const {
        if (static_cast<int>(arch.ops.size()) != depth)
            throw ContractError("architecture depth does not match posterior");
        double lp = 0.0;
        for (int i = 0; i < depth; ++i)
            lp += slot_log_probs(i)[static_cast<std::size_t>(arch.ops[static_cast<std::size_t>(i)])];
        return lp;
    }

    // Independent per-slot categorical draw.
    ArchitectureId sample(Rng& rng) const {
        ArchitectureId a;
        a.ops.reserve(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i)
            a.ops.push_back(static_cast<int>(rng.categorical(slot_probs(i))));
        return a;
    }

    void validate() const {
        if (!all_finite(alpha)) throw NumericError("posterior logits are not finite");
        for (int i = 0; i < depth; ++i) {
            double s = 0.0;
            for (double p : slot_probs(i)) s += p;
            if (std::abs(s - 1.0) > 1e-12)
                throw NumericError("slot probabilities do not sum to 1");
        }
    }
};

// KL(p_alpha || uniform) = sum_i sum_o p_i(o) log(p_i(o) |O|), >= 0.
inline double kl_to_uniform(const ArchPosterior& post) {
    double kl = 0.0;
    for (int i = 0; i < post.depth; ++i) {
        const auto lp = post.slot_log_probs(i);
        for (int o = 0; o < post.num_ops; ++o) {
            const double p = std::exp(lp[static_cast<std::size_t>(o)]);
            if (p > 0.0) kl += p * (lp[static_cast<std::size_t>(o)] + std::log(post.num_ops));
        }
    }
    return std::max(kl, 0.0);
}

// d KL / d alpha_{i,o} = (p_o / tau) (log p_o - sum_u p_u log p_u), blockwise.
inline std::vector<double> kl_grad(const ArchPosterior& post) {
    std::vector<double> g(post.alpha.size(), 0.0);
    for (int i = 0; i < post.depth; ++i) {
        const auto lp = post.slot_log_probs(i);
        double mean_logp = 0.0;
        for (int o = 0; o < post.num_ops; ++o)
            mean_logp += std::exp(lp[static_cast<std::size_t>(o)]) * lp[static_cast<std::size_t>(o)];
        for (int o = 0; o < post.num_ops; ++o) {
            const double p = std::exp(lp[static_cast<std::size_t>(o)]);
            g[static_cast<std::size_t>(i) * post.num_ops + o] =
                p * (lp[static_cast<std::size_t>(o)] - mean_logp) / post.tau;
        }
    }
    return g;
}

// Diversity proxy |p(A1) - p(A2)| from the posterior-gap bound.
inline double posterior_gap(const ArchPosterior& post, const ArchitectureId& a1,
                            const ArchitectureId& a2) {
    return std::abs(std::exp(post.log_prob(a1)) - std::exp(post.log_prob(a2)));
}

// -- likelihood -----------------------------------------------------------------

// Mean cross-entropy of one architecture over a dataset, using shared weights.
inline double arch_mean_cross_entropy(Supernet& net, const ArchitectureId& arch,
                                      const Dataset& data) {
    Tape tape;
    auto loss = activations_and_loss(tape, net.forward(tape, arch, data.inputs), data.labels);
    return tape.value(loss).values[0];
}

// log p(D|A) ~= -(mean validation cross-entropy) * scale. The scale defaults
// to the subset size capped at 512, a temperature-like control that keeps the
// posterior from collapsing at desk scale.
inline double default_likelihood_scale(int subset_size, int cap = 512) {
    return static_cast<double>(std::min(subset_size, cap));
}

struct LikelihoodTable {
    std::vector<ArchitectureId> archs; // enumeration order
    std::vector<double> loglik;        // aligned with archs
    double scale = 1.0;
};

inline LikelihoodTable build_likelihood_table(Supernet& net, const Dataset& data, double scale,
                                              std::uint64_t enumeration_cap = 10000) {
    if (!net.frozen) throw StateError("likelihood table requires a frozen supernet");
    LikelihoodTable table;
    table.scale = scale;
    table.archs = net.space.enumerate(enumeration_cap);
    table.loglik.reserve(table.archs.size());
    for (const auto& arch : table.archs)
        table.loglik.push_back(-arch_mean_cross_entropy(net, arch, data) * scale);
    return table;
}

// -- ELBO estimators --------------------------------------------------------------

struct ElboEstimate {
    double value = 0.0;
    double likelihood_term = 0.0;
    double kl_term = 0.0;
    std::vector<double> grad_alpha;
    std::string estimator; // "exact" | "st-gumbel"
};

// Exact ELBO over an enumerated space: likelihood term sum_A p(A) logL(A) with
// the closed-form categorical derivative. Zero variance; the oracle route for
// the stochastic estimator.
inline ElboEstimate elbo_grad_exact(const ArchPosterior& post, const LikelihoodTable& table) {
    ElboEstimate est;
    est.estimator = "exact";
    est.grad_alpha.assign(post.alpha.size(), 0.0);

    std::vector<std::vector<double>> slot_probs(static_cast<std::size_t>(post.depth));
    for (int i = 0; i < post.depth; ++i) slot_probs[static_cast<std::size_t>(i)] = post.slot_probs(i);

    for (std::size_t a = 0; a < table.archs.size(); ++a) {
        const ArchitectureId& arch = table.archs[a];
        double pa = 1.0;
        for (int i = 0; i < post.depth; ++i)
            pa *= slot_probs[static_cast<std::size_t>(i)]
                            [static_cast<std::size_t>(arch.ops[static_cast<std::size_t>(i)])];
        const double weighted = pa * table.loglik[a];
        est.likelihood_term += weighted;
        // d p(A)/d alpha_{i,o} = p(A) (1[A_i=o] - p_i(o)) / tau
        for (int i = 0; i < post.depth; ++i) {
            const int sel = arch.ops[static_cast<std::size_t>(i)];
            for (int o = 0; o < post.num_ops; ++o) {
                const double ind = o == sel ? 1.0 : 0.0;
                est.grad_alpha[static_cast<std::size_t>(i) * post.num_ops + o] +=
                    weighted * (ind - slot_probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(o)]) /
                    post.tau;
            }
        }
    }
    est.kl_term = kl_to_uniform(post);
    est.value = est.likelihood_term - est.kl_term;
    const auto kg = kl_grad(post);
    for (std::size_t i = 0; i < est.grad_alpha.size(); ++i) est.grad_alpha[i] -= kg[i];
    if (!all_finite(est.grad_alpha) || !std::isfinite(est.value))
        throw NumericError("non-finite exact ELBO estimate");
    return est;
}

inline ElboEstimate elbo_grad_exact(const ArchPosterior& post, Supernet& net, const Dataset& data,
                                    double scale, std::uint64_t enumeration_cap = 10000) {
    return elbo_grad_exact(post, build_likelihood_table(net, data, scale, enumeration_cap));
}

inline double elbo_value(const ArchPosterior& post, const LikelihoodTable& table) {
    double lik = 0.0;
    for (std::size_t a = 0; a < table.archs.size(); ++a) {
        double pa = 1.0;
        for (int i = 0; i < post.depth; ++i)
            pa *= post.slot_probs(i)[static_cast<std::size_t>(
                table.archs[a].ops[static_cast<std::size_t>(i)])];
        lik += pa * table.loglik[a];
    }
    return lik - kl_to_uniform(post);
}

// Gumbel-perturbed relaxation state for one estimator draw.
struct StgsDraw {
    std::vector<Tensor> slot_weights; // soft weights y_i, one length-O tensor per slot
    std::vector<int> hard;            // argmax of perturbed logits per slot
};

inline StgsDraw stgs_draw(const ArchPosterior& post, Rng& rng, double gumbel_temp) {
    StgsDraw d;
    d.slot_weights.reserve(static_cast<std::size_t>(post.depth));
    d.hard.reserve(static_cast<std::size_t>(post.depth));
    for (int i = 0; i < post.depth; ++i) {
        std::vector<double> z(static_cast<std::size_t>(post.num_ops));
        for (int o = 0; o < post.num_ops; ++o) z[static_cast<std::size_t>(o)] = post.logit(i, o) / post.tau + rng.gumbel();
        const int hard = static_cast<int>(
            std::max_element(z.begin(), z.end()) - z.begin());
        double m = *std::max_element(z.begin(), z.end());
        double lse = 0.0;
        for (double v : z) lse += std::exp((v - m) / gumbel_temp);
        Tensor w = Tensor::zeros({post.num_ops});
        for (int o = 0; o < post.num_ops; ++o)
            w.values[static_cast<std::size_t>(o)] =
                std::exp((z[static_cast<std::size_t>(o)] - m) / gumbel_temp) / lse;
        d.slot_weights.push_back(std::move(w));
        d.hard.push_back(hard);
    }
    return d;
}

// Forward pass where every slot computes all op branches and combines them
// with straight-through weights: the hard one-hot drives the value, gradients
// flow through the soft weights.
inline Tape::NodeId mixed_forward(Tape& tape, Supernet& net, StgsDraw& draw,
                                  const Tensor& batch) {
    Tape::NodeId h = forward_dense(tape, tape.constant(batch), tape.constant(net.stem_w),
                                   tape.constant(net.stem_b));
    for (int s = 0; s < net.space.depth; ++s) {
        std::vector<Tape::NodeId> branches;
        branches.reserve(static_cast<std::size_t>(net.space.opset.size()));
        for (int o = 0; o < net.space.opset.size(); ++o) {
            switch (net.space.opset[o]) {
            case OpKind::Identity:
                branches.push_back(h);
                break;
            case OpKind::DenseRelu: {
                auto& p = net.bank(s, o);
                branches.push_back(
                    tape.relu(forward_dense(tape, h, tape.constant(p.w), tape.constant(p.b))));
                break;
            }
            case OpKind::DenseTanh: {
                auto& p = net.bank(s, o);
                branches.push_back(
                    tape.tanh_(forward_dense(tape, h, tape.constant(p.w), tape.constant(p.b))));
                break;
            }
            }
        }
        h = tape.mix(branches, tape.param(draw.slot_weights[static_cast<std::size_t>(s)]),
                     draw.hard[static_cast<std::size_t>(s)]);
    }
    return forward_dense(tape, h, tape.constant(net.head_w), tape.constant(net.head_b));
}

// Single-sample Straight-Through Gumbel-Softmax estimator of the ELBO
// gradient. The cross-entropy gradient reaches the soft weights on the tape;
// the softmax Jacobian chains it into alpha. The KL gradient is analytic.
inline ElboEstimate elbo_grad_stgs(const ArchPosterior& post, Supernet& net, const Dataset& batch,
                                   Rng& rng, double scale, double gumbel_temp = 1.0) {
    if (!net.frozen) throw StateError("ST-GS estimator requires a frozen supernet");
    StgsDraw draw = stgs_draw(post, rng, gumbel_temp);
    for (Tensor& w : draw.slot_weights) {
        w.ensure_grad();
        w.zero_grad();
    }
    Tape tape;
    auto loss_node =
        activations_and_loss(tape, mixed_forward(tape, net, draw, batch.inputs), batch.labels);
    const double ce = tape.value(loss_node).values[0];
    tape.backward(loss_node);

    ElboEstimate est;
    est.estimator = "st-gumbel";
    est.likelihood_term = -ce * scale;
    est.kl_term = kl_to_uniform(post);
    est.value = est.likelihood_term - est.kl_term;
    est.grad_alpha.assign(post.alpha.size(), 0.0);
    for (int i = 0; i < post.depth; ++i) {
        const Tensor& w = draw.slot_weights[static_cast<std::size_t>(i)];
        // d y_u / d alpha_o = y_u (1[u=o] - y_o) / (tau * gumbel_temp)
        for (int o = 0; o < post.num_ops; ++o) {
            double acc = 0.0;
            for (int u = 0; u < post.num_ops; ++u) {
                const double ind = u == o ? 1.0 : 0.0;
                acc += w.grad[static_cast<std::size_t>(u)] * w.values[static_cast<std::size_t>(u)] *
                       (ind - w.values[static_cast<std::size_t>(o)]);
            }
            est.grad_alpha[static_cast<std::size_t>(i) * post.num_ops + o] =
                -scale * acc / (post.tau * gumbel_temp);
        }
    }
    const auto kg = kl_grad(post);
    for (std::size_t i = 0; i < est.grad_alpha.size(); ++i) est.grad_alpha[i] -= kg[i];
    if (!all_finite(est.grad_alpha) || !std::isfinite(est.value))
        throw NumericError("non-finite ST-GS ELBO estimate");
    return est;
}

// -- fitting -----------------------------------------------------------------------

enum class ElboEstimator { Exact, StGumbel };

inline const char* estimator_name(ElboEstimator e) {
    return e == ElboEstimator::Exact ? "exact" : "st-gumbel";
}

inline ElboEstimator estimator_from_name(const std::string& s) {
    if (s == "exact") return ElboEstimator::Exact;
    if (s == "st-gumbel") return ElboEstimator::StGumbel;
    throw ConfigError("unknown ELBO estimator: " + s);
}

struct FitConfig {
    ElboEstimator estimator = ElboEstimator::Exact;
    int epochs = 20;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 3e-4;
    int batch_size = 64;          // st-gumbel
    int steps_per_epoch = 25;     // exact
    double gumbel_temp = 1.0;
    double likelihood_scale = 0.0; // 0 = subset size capped at scale_cap
    int scale_cap = 512;
    std::uint64_t enumeration_cap = 10000;
    std::uint64_t seed = 0;
};

struct FitResult {
    ArchPosterior posterior;
    std::vector<double> elbo_trace; // one entry per epoch
    double scale = 0.0;
};

// Exact-estimator fit against a prebuilt likelihood table (the table is the
// only thing the data contributes once the supernet is frozen).
inline FitResult fit_with_table(const ArchPosterior& init, const LikelihoodTable& table,
                                const FitConfig& cfg) {
    FitResult out;
    out.posterior = init;
    out.scale = table.scale;
    Tensor alpha({init.depth, init.num_ops}, init.alpha);
    alpha.ensure_grad();
    Optimizer opt({OptimizerKind::Adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int s = 0; s < cfg.steps_per_epoch; ++s) {
            ElboEstimate est = elbo_grad_exact(out.posterior, table);
            for (std::size_t i = 0; i < est.grad_alpha.size(); ++i)
                alpha.grad[i] = -est.grad_alpha[i];
            opt.step("alpha", alpha);
            out.posterior.alpha = alpha.values;
        }
        out.elbo_trace.push_back(elbo_value(out.posterior, table));
    }
    out.posterior.validate();
    return out;
}

// Maximizes the ELBO with Adam. The exact estimator reuses a likelihood table
// computed once (the supernet is frozen); the ST-GS estimator consumes seeded
// mini-batches of the posterior subset.
inline FitResult fit(const ArchPosterior& init, Supernet& net, const Dataset& subset,
                     const FitConfig& cfg) {
    if (!net.frozen) throw StateError("posterior fitting requires a frozen supernet");
    FitResult out;
    out.posterior = init;
    out.scale = cfg.likelihood_scale > 0.0
                    ? cfg.likelihood_scale
                    : default_likelihood_scale(subset.size(), cfg.scale_cap);

    if (cfg.estimator == ElboEstimator::Exact) {
        return fit_with_table(init, build_likelihood_table(net, subset, out.scale, cfg.enumeration_cap),
                              cfg);
    }

    Tensor alpha({out.posterior.depth, out.posterior.num_ops}, out.posterior.alpha);
    alpha.ensure_grad();
    Optimizer opt({OptimizerKind::Adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay});

    auto apply = [&](const std::vector<double>& grad_elbo) {
        for (std::size_t i = 0; i < grad_elbo.size(); ++i) alpha.grad[i] = -grad_elbo[i];
        opt.step("alpha", alpha);
        out.posterior.alpha = alpha.values;
    };

    {
        Rng shuffle_rng = derive_rng(cfg.seed, "posterior/shuffle");
        Rng gumbel_rng = derive_rng(cfg.seed, "posterior/gumbel");
        std::vector<int> order(static_cast<std::size_t>(subset.size()));
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            double epoch_elbo = 0.0;
            int steps = 0;
            for (std::size_t off = 0; off < order.size();
                 off += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t count =
                    std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - off);
                Dataset batch = subset.batch(order, off, count);
                ElboEstimate est = elbo_grad_stgs(out.posterior, net, batch, gumbel_rng, out.scale,
                                                  cfg.gumbel_temp);
                apply(est.grad_alpha);
                epoch_elbo += est.value;
                ++steps;
            }
            out.elbo_trace.push_back(epoch_elbo / std::max(steps, 1));
        }
    }
    out.posterior.validate();
    return out;
}

// -- persistence -----------------------------------------------------------------------

inline void save_posterior(const ArchPosterior& post, const OpSet& opset,
                           const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["D"] = post.depth;
    j["opset"] = opset.names();
    j["tau"] = post.tau;
    j["alpha"] = post.alpha;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write posterior: " + path.string());
    out << j.dump(2) << "\n";
}

inline ArchPosterior load_posterior(const std::filesystem::path& path, OpSet* opset_out = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open posterior: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    ArchPosterior post;
    post.depth = j.at("D").get<int>();
    post.tau = j.at("tau").get<double>();
    post.alpha = j.at("alpha").get<std::vector<double>>();
    OpSet opset = OpSet::from_names(j.at("opset").get<std::vector<std::string>>());
    post.num_ops = opset.size();
    if (opset_out != nullptr) *opset_out = opset;
    if (post.alpha.size() != static_cast<std::size_t>(post.depth) * post.num_ops)
        throw FormatError("posterior alpha size mismatch in " + path.string());
    return post;
}

} // namespace nesbs
