#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "nesbs/error.hpp"
#include "nesbs/posterior.hpp"
#include "nesbs/rng.hpp"
#include "nesbs/searchspace.hpp"

namespace nesbs {

// One SVGD particle: length D*|O| for architecture sampling (D blocks of |O|
// coordinates), or 2 for synthetic densities.
struct Particle {
    std::vector<double> x;

    bool finite() const { return all_finite(x); }
};

struct LogDensityResult {
    double log_p = 0.0;
    std::vector<double> grad;
};

// Unnormalized target density with analytic score, the only interface the
// SVGD machinery needs.
struct TargetDensity {
    int dim = 0;
    std::function<LogDensityResult(const std::vector<double>&)> log_density_grad;
};

// -- densities ---------------------------------------------------------------

// Continuous relaxation of the categorical posterior: per slot, a mixture of
// Gaussians centered on the one-hot operation codes with covariance |O| * I
// and mixture weights p_i(o). Normalization constants are dropped.
struct RelaxedDensity {
    ArchPosterior posterior;
    double covariance_scale = 0.0; // |O| by construction
    int blocks = 0;
    int block_size = 0;

    explicit RelaxedDensity(ArchPosterior post)
        : posterior(std::move(post)),
          covariance_scale(static_cast<double>(posterior.num_ops)),
          blocks(posterior.depth),
          block_size(posterior.num_ops) {
        if (covariance_scale <= 0.0) throw ContractError("relaxed density needs ops");
    }

    int dim() const { return blocks * block_size; }

    LogDensityResult eval(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != dim())
            throw DimensionError("particle length " + std::to_string(x.size()) +
                                 " does not match relaxed layout " + std::to_string(dim()));
        LogDensityResult out;
        out.grad.assign(x.size(), 0.0);
        const double s = covariance_scale;
        for (int i = 0; i < blocks; ++i) {
            const auto logp = posterior.slot_log_probs(i);
            const double* xi = x.data() + static_cast<std::size_t>(i) * block_size;
            // component log-weights: log p_i(o) - ||x_i - h_o||^2 / (2s)
            std::vector<double> lw(static_cast<std::size_t>(block_size));
            for (int o = 0; o < block_size; ++o) {
                double d2 = 0.0;
                for (int u = 0; u < block_size; ++u) {
                    const double d = xi[u] - (u == o ? 1.0 : 0.0);
                    d2 += d * d;
                }
                lw[static_cast<std::size_t>(o)] = logp[static_cast<std::size_t>(o)] - d2 / (2.0 * s);
            }
            const double m = *std::max_element(lw.begin(), lw.end());
            double z = 0.0;
            for (double v : lw) z += std::exp(v - m);
            out.log_p += m + std::log(z);
            // responsibilities pull each block toward its component means
            double* gi = out.grad.data() + static_cast<std::size_t>(i) * block_size;
            for (int o = 0; o < block_size; ++o) {
                const double r = std::exp(lw[static_cast<std::size_t>(o)] - m) / z;
                for (int u = 0; u < block_size; ++u)
                    gi[u] += r * ((u == o ? 1.0 : 0.0) - xi[u]) / s;
            }
        }
        return out;
    }

    TargetDensity as_target() const {
        RelaxedDensity copy = *this;
        return TargetDensity{dim(), [copy](const std::vector<double>& x) { return copy.eval(x); }};
    }
};

inline TargetDensity make_relaxed_density(const ArchPosterior& post) {
    return RelaxedDensity(post).as_target();
}

// Unnormalized diagonal-covariance Gaussian.
inline TargetDensity make_gaussian(std::vector<double> mean, std::vector<double> diag_var) {
    const int dim = static_cast<int>(mean.size());
    return TargetDensity{
        dim, [mean = std::move(mean), diag_var = std::move(diag_var)](const std::vector<double>& x) {
            LogDensityResult out;
            out.grad.assign(x.size(), 0.0);
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = x[i] - mean[i];
                out.log_p -= d * d / (2.0 * diag_var[i]);
                out.grad[i] = -d / diag_var[i];
            }
            return out;
        }};
}

// Two-component 2-D Gaussian mixture with equal diagonal covariances
// (unnormalized sum; the shared normalizer cancels in the score).
inline TargetDensity make_gaussian_mixture_2d(const std::vector<std::vector<double>>& means,
                                              const std::vector<double>& diag_var) {
    return TargetDensity{2, [means, diag_var](const std::vector<double>& x) {
                             LogDensityResult out;
                             out.grad.assign(2, 0.0);
                             std::vector<double> lw(means.size());
                             for (std::size_t k = 0; k < means.size(); ++k) {
                                 double l = 0.0;
                                 for (int d = 0; d < 2; ++d) {
                                     const double diff = x[static_cast<std::size_t>(d)] - means[k][static_cast<std::size_t>(d)];
                                     l -= diff * diff / (2.0 * diag_var[static_cast<std::size_t>(d)]);
                                 }
                                 lw[k] = l;
                             }
                             const double m = *std::max_element(lw.begin(), lw.end());
                             double z = 0.0;
                             for (double v : lw) z += std::exp(v - m);
                             out.log_p = m + std::log(z);
                             for (std::size_t k = 0; k < means.size(); ++k) {
                                 const double r = std::exp(lw[k] - m) / z;
                                 for (int d = 0; d < 2; ++d)
                                     out.grad[static_cast<std::size_t>(d)] +=
                                         r * (means[k][static_cast<std::size_t>(d)] - x[static_cast<std::size_t>(d)]) /
                                         diag_var[static_cast<std::size_t>(d)];
                             }
                             return out;
                         }};
}

// The two-mode target used for the diversity-sweep experiment:
// u1=(-1,0), u2=(0,1), covariance diag(0.25, 0.5) for both components.
inline TargetDensity make_two_mode_target() {
    return make_gaussian_mixture_2d({{-1.0, 0.0}, {0.0, 1.0}}, {0.25, 0.5});
}

// Max density of a 2-D target over a regular grid (reference level for the
// high-density particle fraction).
inline double grid_max_density(const TargetDensity& target, double lo, double hi, int steps) {
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= steps; ++i)
        for (int j = 0; j <= steps; ++j) {
            const double x = lo + (hi - lo) * i / steps;
            const double y = lo + (hi - lo) * j / steps;
            best = std::max(best, target.log_density_grad({x, y}).log_p);
        }
    return best;
}

// -- kernel ---------------------------------------------------------------------

struct RbfKernelResult {
    double k = 0.0;
    std::vector<double> grad_x;
    std::vector<double> grad_y;
};

// k(x, y) = exp(-||x - y||^2 / (2 h^2)); k(x, x) = 1 for every x.
inline RbfKernelResult rbf_kernel(const std::vector<double>& x, const std::vector<double>& y,
                                  double h) {
    if (!(h > 0.0)) throw ContractError("rbf bandwidth must be positive");
    if (x.size() != y.size()) throw DimensionError("rbf kernel inputs differ in length");
    RbfKernelResult out;
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        d2 += d * d;
    }
    out.k = std::exp(-d2 / (2.0 * h * h));
    out.grad_x.resize(x.size());
    out.grad_y.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        out.grad_x[i] = -out.k * d / (h * h);
        out.grad_y[i] = out.k * d / (h * h);
    }
    return out;
}

// Median heuristic: h^2 = med^2 / log(n + 1) with med the median pairwise
// Euclidean distance, recomputed every iteration.
inline double median_bandwidth(const std::vector<Particle>& particles) {
    const std::size_t n = particles.size();
    if (n < 2) return 1.0;
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (std::size_t d = 0; d < particles[i].x.size(); ++d) {
                const double diff = particles[i].x[d] - particles[j].x[d];
                d2 += diff * diff;
            }
            dists.push_back(std::sqrt(d2));
        }
    const std::size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
    const double med = dists[mid];
    if (med < 1e-12) return 1.0;
    return std::sqrt(med * med / std::log(static_cast<double>(n) + 1.0));
}

// -- SVGD-RD -----------------------------------------------------------------------

struct SvgdConfig {
    int particles = 15;
    int iterations = 1000;
    double step_size = 0.1;
    double delta = 0.0;
    double fixed_bandwidth = 0.0; // 0 = median heuristic each iteration
    bool use_momentum = false;    // SGD momentum 0.9 when set, plain steps otherwise
    double momentum = 0.9;
    std::uint64_t seed = 0;

    void validate() const {
        if (particles < 1) throw ConfigError("svgd needs at least one particle");
        if (iterations < 1) throw ConfigError("svgd needs at least one iteration");
        if (!(step_size > 0.0)) throw ConfigError("svgd step size must be positive");
    }
};

// The update direction of the diversity-regularized step for particle i:
//   (1/n) sum_j [ k(x_j, x_i) grad_{x_j} log p(x_j)
//                 + grad_{x_j} k(x_j, x_i)
//                 - delta * grad_{x_i} k(x_j, x_i) ].
// For the RBF kernel grad_{x_i} k = -grad_{x_j} k, so delta = 0 recovers the
// plain SVGD update exactly.
inline std::vector<Particle> svgd_rd_phi(const std::vector<Particle>& particles,
                                         const TargetDensity& target, double delta,
                                         double bandwidth) {
    const std::size_t n = particles.size();
    std::vector<LogDensityResult> scores(n);
    for (std::size_t j = 0; j < n; ++j) scores[j] = target.log_density_grad(particles[j].x);

    std::vector<Particle> phi(n);
    for (std::size_t i = 0; i < n; ++i) {
        phi[i].x.assign(particles[i].x.size(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const RbfKernelResult k = rbf_kernel(particles[j].x, particles[i].x, bandwidth);
            for (std::size_t d = 0; d < phi[i].x.size(); ++d)
                phi[i].x[d] += k.k * scores[j].grad[d] + k.grad_x[d] - delta * k.grad_y[d];
        }
        for (double& v : phi[i].x) v /= static_cast<double>(n);
    }
    return phi;
}

// Standard SVGD update (kernel-weighted score ascent plus repulsion), written
// as its own accumulation loop so the delta = 0 identity of the regularized
// step can be checked bit-exactly against it.
inline std::vector<Particle> svgd_plain_step(std::vector<Particle> particles,
                                             const TargetDensity& target, double bandwidth,
                                             double eps) {
    const std::size_t n = particles.size();
    std::vector<LogDensityResult> scores(n);
    for (std::size_t j = 0; j < n; ++j) scores[j] = target.log_density_grad(particles[j].x);
    std::vector<Particle> phi(n);
    for (std::size_t i = 0; i < n; ++i) {
        phi[i].x.assign(particles[i].x.size(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const RbfKernelResult k = rbf_kernel(particles[j].x, particles[i].x, bandwidth);
            for (std::size_t d = 0; d < phi[i].x.size(); ++d)
                phi[i].x[d] += k.k * scores[j].grad[d] + k.grad_x[d];
        }
        for (double& v : phi[i].x) v /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < particles[i].x.size(); ++d)
            particles[i].x[d] += eps * phi[i].x[d];
    return particles;
}

// One plain step: x_i <- x_i + eps * phi(x_i), all particles updated from the
// same pre-step state.
inline std::vector<Particle> svgd_rd_step(std::vector<Particle> particles,
                                          const TargetDensity& target, double delta,
                                          double bandwidth, double eps) {
    const std::vector<Particle> phi = svgd_rd_phi(particles, target, delta, bandwidth);
    for (std::size_t i = 0; i < particles.size(); ++i) {
        for (std::size_t d = 0; d < particles[i].x.size(); ++d)
            particles[i].x[d] += eps * phi[i].x[d];
        if (!particles[i].finite())
            throw NumericError("non-finite particle " + std::to_string(i) + " after svgd step");
    }
    return particles;
}

// Block layout for architecture particles.
struct ParticleLayout {
    int blocks = 0;     // D
    int block_size = 0; // |O|
    int dim() const { return blocks * block_size; }
};

// Architecture particles start at a uniformly chosen one-hot code per block
// plus Gaussian noise of std 0.1; synthetic 2-D particles are standard normal.
inline std::vector<Particle> init_particles(int n, const ParticleLayout& layout, Rng& rng) {
    std::vector<Particle> out(static_cast<std::size_t>(n));
    for (auto& p : out) {
        p.x.assign(static_cast<std::size_t>(layout.dim()), 0.0);
        for (int b = 0; b < layout.blocks; ++b) {
            const int hot = static_cast<int>(rng.below(static_cast<std::uint64_t>(layout.block_size)));
            for (int u = 0; u < layout.block_size; ++u)
                p.x[static_cast<std::size_t>(b * layout.block_size + u)] =
                    (u == hot ? 1.0 : 0.0) + rng.normal(0.0, 0.1);
        }
    }
    return out;
}

inline std::vector<Particle> init_particles_gaussian(int n, int dim, Rng& rng) {
    std::vector<Particle> out(static_cast<std::size_t>(n));
    for (auto& p : out) {
        p.x.resize(static_cast<std::size_t>(dim));
        for (double& v : p.x) v = rng.normal();
    }
    return out;
}

struct SvgdSnapshot {
    int iteration = 0;
    std::vector<Particle> particles;
    std::vector<double> log_density;
};

struct SvgdRun {
    std::vector<Particle> particles;
    std::vector<SvgdSnapshot> snapshots; // every L/10 iterations plus the final state
};

// Runs L iterations of the diversity-regularized update from the given
// initial particles, with the configured optimizer and bandwidth policy.
inline SvgdRun run_svgd_rd(const SvgdConfig& cfg, const TargetDensity& target,
                           std::vector<Particle> particles) {
    cfg.validate();
    if (static_cast<int>(particles.size()) != cfg.particles)
        throw ContractError("particle count does not match config");

    SvgdRun run;
    std::vector<Particle> velocity(particles.size());
    for (std::size_t i = 0; i < particles.size(); ++i)
        velocity[i].x.assign(particles[i].x.size(), 0.0);

    const int snap_every = std::max(cfg.iterations / 10, 1);
    auto snapshot = [&](int iter) {
        SvgdSnapshot s;
        s.iteration = iter;
        s.particles = particles;
        for (const auto& p : particles) s.log_density.push_back(target.log_density_grad(p.x).log_p);
        run.snapshots.push_back(std::move(s));
    };
    snapshot(0);

    for (int l = 0; l < cfg.iterations; ++l) {
        const double h = cfg.fixed_bandwidth > 0.0 ? cfg.fixed_bandwidth
                                                   : median_bandwidth(particles);
        if (!cfg.use_momentum) {
            particles = svgd_rd_step(std::move(particles), target, cfg.delta, h, cfg.step_size);
        } else {
            const std::vector<Particle> phi = svgd_rd_phi(particles, target, cfg.delta, h);
            for (std::size_t i = 0; i < particles.size(); ++i) {
                for (std::size_t d = 0; d < particles[i].x.size(); ++d) {
                    velocity[i].x[d] = cfg.momentum * velocity[i].x[d] + phi[i].x[d];
                    particles[i].x[d] += cfg.step_size * velocity[i].x[d];
                }
                if (!particles[i].finite())
                    throw NumericError("non-finite particle " + std::to_string(i) +
                                       " at iteration " + std::to_string(l));
            }
        }
        if ((l + 1) % snap_every == 0 || l + 1 == cfg.iterations) snapshot(l + 1);
    }
    run.particles = particles;
    return run;
}

inline SvgdRun run_svgd_rd(const SvgdConfig& cfg, const TargetDensity& target, Rng& rng,
                           const ParticleLayout* layout = nullptr) {
    std::vector<Particle> init =
        layout != nullptr ? init_particles(cfg.particles, *layout, rng)
                          : init_particles_gaussian(cfg.particles, target.dim, rng);
    return run_svgd_rd(cfg, target, std::move(init));
}

// -- decoding -----------------------------------------------------------------------

// Nearest one-hot code per block, ties broken toward the lowest op index.
inline ArchitectureId decode_particle(const Particle& p, const ParticleLayout& layout) {
    if (static_cast<int>(p.x.size()) != layout.dim())
        throw DimensionError("particle length does not match layout");
    ArchitectureId arch;
    arch.ops.reserve(static_cast<std::size_t>(layout.blocks));
    for (int b = 0; b < layout.blocks; ++b) {
        const double* xi = p.x.data() + static_cast<std::size_t>(b) * layout.block_size;
        int best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (int o = 0; o < layout.block_size; ++o) {
            double d2 = 0.0;
            for (int u = 0; u < layout.block_size; ++u) {
                const double d = xi[u] - (u == o ? 1.0 : 0.0);
                d2 += d * d;
            }
            if (d2 < best_d2 - 1e-15) {
                best_d2 = d2;
                best = o;
            }
        }
        arch.ops.push_back(best);
    }
    return arch;
}

inline std::vector<ArchitectureId> decode_particles(const std::vector<Particle>& particles,
                                                    const ParticleLayout& layout) {
    std::vector<ArchitectureId> out;
    out.reserve(particles.size());
    for (const auto& p : particles) out.push_back(decode_particle(p, layout));
    return out;
}

inline Particle encode_architecture(const ArchitectureId& arch, const ParticleLayout& layout) {
    Particle p;
    p.x.assign(static_cast<std::size_t>(layout.dim()), 0.0);
    for (int b = 0; b < layout.blocks; ++b)
        p.x[static_cast<std::size_t>(b * layout.block_size + arch.ops[static_cast<std::size_t>(b)])] = 1.0;
    return p;
}

// -- MC sampling -----------------------------------------------------------------------

// Draws an ensemble of n architectures from the posterior. Duplicates are
// re-drawn up to 100 times each and then admitted, so the result is a
// multiset of exactly n members.
inline std::vector<ArchitectureId> mc_sample_ensemble(const ArchPosterior& post, int n, Rng& rng) {
    if (n < 1) throw ConfigError("ensemble size must be >= 1");
    std::vector<ArchitectureId> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ArchitectureId cand = post.sample(rng);
        for (int retry = 0; retry < 100; ++retry) {
            if (std::find(out.begin(), out.end(), cand) == out.end()) break;
            cand = post.sample(rng);
        }
        out.push_back(std::move(cand));
    }
    return out;
}

// -- diagnostics -----------------------------------------------------------------------

inline double mean_pairwise_distance(const std::vector<Particle>& particles) {
    const std::size_t n = particles.size();
    if (n < 2) return 0.0;
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (std::size_t d = 0; d < particles[i].x.size(); ++d) {
                const double diff = particles[i].x[d] - particles[j].x[d];
                d2 += diff * diff;
            }
            total += std::sqrt(d2);
            ++pairs;
        }
    return total / static_cast<double>(pairs);
}

// CSV: iteration, particle_index, coordinates..., log_density
inline void write_trajectory_csv(std::ostream& out, const SvgdRun& run) {
    if (run.snapshots.empty()) return;
    const std::size_t dim = run.snapshots.front().particles.front().x.size();
    out << "iteration,particle";
    for (std::size_t d = 0; d < dim; ++d) out << ",x" << d;
    out << ",log_density\n";
    for (const auto& snap : run.snapshots)
        for (std::size_t i = 0; i < snap.particles.size(); ++i) {
            out << snap.iteration << "," << i;
            for (double v : snap.particles[i].x) out << "," << v;
            out << "," << snap.log_density[i] << "\n";
        }
}

} // namespace nesbs
