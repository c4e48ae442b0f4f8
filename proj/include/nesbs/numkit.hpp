#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "nesbs/error.hpp"
#include "nesbs/rng.hpp"

namespace nesbs {

// Dense row-major tensor of 64-bit reals with an optional gradient buffer of
// the same shape. All arithmetic in the project runs through this type.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad; // empty unless gradients were requested

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<std::size_t>(numel_of(shape)) != values.size())
            throw DimensionError("tensor values length does not match shape");
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw DimensionError("negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(std::vector<int> s, double v) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : shape[0]); }
    int cols() const { return shape.size() == 2 ? shape[1] : 1; }

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols() + c]; }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Row-wise numerically stabilized softmax (pure function, not taped).
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.shape.size() != 2) throw DimensionError("softmax_rows expects a 2-d tensor");
    Tensor out = Tensor::zeros(logits.shape);
    const int b = logits.shape[0], c = logits.shape[1];
    for (int i = 0; i < b; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) m = std::max(m, logits.at(i, j));
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(logits.at(i, j) - m);
        for (int j = 0; j < c; ++j) out.at(i, j) = std::exp(logits.at(i, j) - m) / z;
    }
    return out;
}

// Reverse-mode tape. Records primitive operations in topological order during
// the forward pass; backward() walks them once in reverse. A tape is built per
// forward pass and thrown away (no graph caching).
class Tape {
public:
    using NodeId = int;

    enum class Op {
        Leaf,
        Matmul,
        BiasAdd,
        Relu,
        Tanh,
        Add,
        Mul,
        Scale,
        Sum,
        Mix,
        SoftmaxXent,
    };

    // -- leaves ------------------------------------------------------------

    // Constant leaf: value is copied, never receives a gradient.
    NodeId constant(Tensor value) {
        return push_leaf(std::move(value), nullptr, false);
    }

    // Parameter leaf: bound to an external tensor; backward() accumulates
    // d(loss)/d(param) into param.grad. The tensor must outlive the tape.
    NodeId param(Tensor& p) { return push_leaf(p, &p, true); }

    // -- primitives ----------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
            throw DimensionError("matmul shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
        const int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor out = Tensor::zeros({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const double aik = ta.at(i, p);
                if (aik == 0.0) continue;
                for (int j = 0; j < n; ++j) out.at(i, j) += aik * tb.at(p, j);
            }
        return push(Op::Matmul, {a, b}, std::move(out));
    }

    // out[i,j] = m[i,j] + bias[j]
    NodeId bias_add(NodeId m, NodeId bias) {
        const Tensor& tm = val(m);
        const Tensor& tb = val(bias);
        if (tm.shape.size() != 2 || static_cast<std::int64_t>(tm.shape[1]) != tb.numel())
            throw DimensionError("bias_add shape mismatch: " + tm.shape_str() + " vs " + tb.shape_str());
        Tensor out = tm;
        out.grad.clear();
        for (int i = 0; i < tm.shape[0]; ++i)
            for (int j = 0; j < tm.shape[1]; ++j) out.at(i, j) += tb.values[static_cast<std::size_t>(j)];
        return push(Op::BiasAdd, {m, bias}, std::move(out));
    }

    NodeId relu(NodeId a) {
        Tensor out = val(a);
        out.grad.clear();
        for (double& x : out.values) x = x > 0.0 ? x : 0.0;
        return push(Op::Relu, {a}, std::move(out));
    }

    NodeId tanh_(NodeId a) {
        Tensor out = val(a);
        out.grad.clear();
        for (double& x : out.values) x = std::tanh(x);
        return push(Op::Tanh, {a}, std::move(out));
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb))
            throw DimensionError("add shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
        Tensor out = ta;
        out.grad.clear();
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i];
        return push(Op::Add, {a, b}, std::move(out));
    }

    NodeId mul(NodeId a, NodeId b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb))
            throw DimensionError("mul shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
        Tensor out = ta;
        out.grad.clear();
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= tb.values[i];
        return push(Op::Mul, {a, b}, std::move(out));
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = val(a);
        out.grad.clear();
        for (double& x : out.values) x *= c;
        NodeId id = push(Op::Scale, {a}, std::move(out));
        nodes_[static_cast<std::size_t>(id)].scalar = c;
        return id;
    }

    NodeId sum(NodeId a) {
        double s = 0.0;
        for (double x : val(a).values) s += x;
        return push(Op::Sum, {a}, Tensor::scalar(s));
    }

    // Linear combination of equal-shaped branches by a weight vector:
    // out = sum_o weights[o] * branch_o. With hard >= 0 the forward value is
    // branch_hard alone (straight-through); the backward pass still sends
    // <upstream, branch_o> into weights[o], while branch gradients follow the
    // forward-value coefficients (the hard one-hot).
    NodeId mix(const std::vector<NodeId>& branches, NodeId weights, int hard = -1) {
        if (branches.empty()) throw ContractError("mix needs at least one branch");
        const Tensor& tw = val(weights);
        if (tw.numel() != static_cast<std::int64_t>(branches.size()))
            throw DimensionError("mix weight count does not match branch count");
        if (hard >= static_cast<int>(branches.size()))
            throw ContractError("mix hard index out of range");
        const Tensor& t0 = val(branches[0]);
        for (NodeId b : branches)
            if (!val(b).same_shape(t0)) throw DimensionError("mix branches must share a shape");
        Tensor out;
        if (hard >= 0) {
            out = val(branches[static_cast<std::size_t>(hard)]);
            out.grad.clear();
        } else {
            out = Tensor::zeros(t0.shape);
            for (std::size_t o = 0; o < branches.size(); ++o) {
                const double w = tw.values[o];
                const Tensor& b = val(branches[o]);
                for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += w * b.values[i];
            }
        }
        std::vector<NodeId> ins = branches;
        ins.push_back(weights);
        NodeId id = push(Op::Mix, std::move(ins), std::move(out));
        nodes_[static_cast<std::size_t>(id)].hard = hard;
        return id;
    }

    // Mean over the batch of -log softmax(logits)[label], stabilized by
    // max-subtraction. Returns a scalar node.
    NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
        const Tensor& tl = val(logits);
        if (tl.shape.size() != 2) throw DimensionError("cross entropy expects 2-d logits");
        const int b = tl.shape[0], c = tl.shape[1];
        if (static_cast<int>(labels.size()) != b)
            throw DimensionError("label count does not match batch size");
        for (int i = 0; i < b; ++i)
            if (labels[i] < 0 || labels[i] >= c)
                throw IndexError("label " + std::to_string(labels[i]) + " out of range [0, " +
                                 std::to_string(c) + ")");
        Tensor probs = softmax_rows(tl);
        double loss = 0.0;
        for (int i = 0; i < b; ++i) {
            double m = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < c; ++j) m = std::max(m, tl.at(i, j));
            double z = 0.0;
            for (int j = 0; j < c; ++j) z += std::exp(tl.at(i, j) - m);
            loss += -(tl.at(i, labels[i]) - m - std::log(z));
        }
        loss /= b;
        NodeId id = push(Op::SoftmaxXent, {logits}, Tensor::scalar(loss));
        Node& n = nodes_[static_cast<std::size_t>(id)];
        n.labels.assign(labels.begin(), labels.end());
        n.aux = std::move(probs.values);
        return id;
    }

    // -- access ---------------------------------------------------------------

    const Tensor& value(NodeId id) const { return val(id); }
    std::size_t size() const { return nodes_.size(); }

    // Node-local gradient (valid after backward). Leaves bound to parameters
    // also flush into the parameter's grad buffer.
    const std::vector<double>& node_grad(NodeId id) const {
        return nodes_[static_cast<std::size_t>(id)].grad;
    }

    // -- backward ---------------------------------------------------------------

    // Populates gradients of every bound parameter reachable from `loss`.
    // Calling twice without reset() is an error.
    void backward(NodeId loss) {
        if (backward_done_) throw StateError("backward already ran on this tape; reset() first");
        Node& ln = nodes_.at(static_cast<std::size_t>(loss));
        if (ln.value.numel() != 1) throw ContractError("backward requires a scalar loss node");
        for (Node& n : nodes_) n.grad.assign(n.value.values.size(), 0.0);
        ln.grad[0] = 1.0;
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad) continue;
            accumulate_inputs(n);
        }
        for (Node& n : nodes_) {
            if (n.bound != nullptr) {
                n.bound->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
            }
        }
        backward_done_ = true;
    }

    void reset() {
        nodes_.clear();
        backward_done_ = false;
    }

private:
    struct Node {
        Op op = Op::Leaf;
        Tensor value;
        std::vector<double> grad;
        std::vector<NodeId> inputs;
        Tensor* bound = nullptr;
        bool requires_grad = false;
        double scalar = 0.0;     // Scale
        int hard = -1;           // Mix
        std::vector<int> labels; // SoftmaxXent
        std::vector<double> aux; // SoftmaxXent: cached probabilities
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    const Tensor& val(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }

    NodeId push_leaf(Tensor value, Tensor* bound, bool requires_grad) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(value);
        n.value.grad.clear();
        n.bound = bound;
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId push(Op op, std::vector<NodeId> inputs, Tensor out) {
        Node n;
        n.op = op;
        n.value = std::move(out);
        n.inputs = std::move(inputs);
        for (NodeId i : n.inputs)
            n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(i)].requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<double>& g(NodeId id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    void accumulate_inputs(Node& n) {
        switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Matmul: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            auto& ga = g(n.inputs[0]);
            auto& gb = g(n.inputs[1]);
            const int m = a.shape[0], k = a.shape[1], c = b.shape[1];
            // dA = dC * B^T ; dB = A^T * dC
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) {
                    const double d = n.grad[static_cast<std::size_t>(i) * c + j];
                    if (d == 0.0) continue;
                    for (int p = 0; p < k; ++p) {
                        ga[static_cast<std::size_t>(i) * k + p] += d * b.at(p, j);
                        gb[static_cast<std::size_t>(p) * c + j] += d * a.at(i, p);
                    }
                }
            break;
        }
        case Op::BiasAdd: {
            auto& gm = g(n.inputs[0]);
            auto& gbias = g(n.inputs[1]);
            const int b = n.value.shape[0], c = n.value.shape[1];
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < c; ++j) {
                    const double d = n.grad[static_cast<std::size_t>(i) * c + j];
                    gm[static_cast<std::size_t>(i) * c + j] += d;
                    gbias[static_cast<std::size_t>(j)] += d;
                }
            break;
        }
        case Op::Relu: {
            const Tensor& a = val(n.inputs[0]);
            auto& ga = g(n.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (a.values[i] > 0.0) ga[i] += n.grad[i];
            break;
        }
        case Op::Tanh: {
            auto& ga = g(n.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double t = n.value.values[i];
                ga[i] += n.grad[i] * (1.0 - t * t);
            }
            break;
        }
        case Op::Add: {
            auto& ga = g(n.inputs[0]);
            auto& gb = g(n.inputs[1]);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += n.grad[i];
                gb[i] += n.grad[i];
            }
            break;
        }
        case Op::Mul: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            auto& ga = g(n.inputs[0]);
            auto& gb = g(n.inputs[1]);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += n.grad[i] * b.values[i];
                gb[i] += n.grad[i] * a.values[i];
            }
            break;
        }
        case Op::Scale: {
            auto& ga = g(n.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * n.scalar;
            break;
        }
        case Op::Sum: {
            auto& ga = g(n.inputs[0]);
            const double d = n.grad[0];
            for (double& x : ga) x += d;
            break;
        }
        case Op::Mix: {
            const std::size_t k = n.inputs.size() - 1;
            const NodeId wid = n.inputs[k];
            const Tensor& w = val(wid);
            auto& gw = g(wid);
            for (std::size_t o = 0; o < k; ++o) {
                const Tensor& b = val(n.inputs[o]);
                double dot = 0.0;
                for (std::size_t i = 0; i < n.grad.size(); ++i) dot += n.grad[i] * b.values[i];
                gw[o] += dot;
                const double coeff = n.hard >= 0 ? (static_cast<int>(o) == n.hard ? 1.0 : 0.0)
                                                 : w.values[o];
                if (coeff != 0.0) {
                    auto& gb = g(n.inputs[o]);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += coeff * n.grad[i];
                }
            }
            break;
        }
        case Op::SoftmaxXent: {
            auto& gl = g(n.inputs[0]);
            const Tensor& logits = val(n.inputs[0]);
            const int b = logits.shape[0], c = logits.shape[1];
            const double d = n.grad[0] / b;
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < c; ++j) {
                    double p = n.aux[static_cast<std::size_t>(i) * c + j];
                    if (j == n.labels[static_cast<std::size_t>(i)]) p -= 1.0;
                    gl[static_cast<std::size_t>(i) * c + j] += d * p;
                }
            break;
        }
        }
    }
};

// input[BxI] . weights[IxH] + bias[H], recorded on the tape.
inline Tape::NodeId forward_dense(Tape& tape, Tape::NodeId input, Tape::NodeId weights,
                                  Tape::NodeId bias) {
    return tape.bias_add(tape.matmul(input, weights), bias);
}

// Mean cross-entropy of logits against class labels (scalar node).
inline Tape::NodeId activations_and_loss(Tape& tape, Tape::NodeId logits,
                                         std::span<const int> labels) {
    return tape.softmax_cross_entropy(logits, labels);
}

inline void backward(Tape& tape, Tape::NodeId loss) { tape.backward(loss); }

// -- optimizers ---------------------------------------------------------------

enum class OptimizerKind { SgdMomentum, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::SgdMomentum;
    double lr = 0.05;
    double momentum = 0.9; // beta1 for Adam
    double beta2 = 0.999;
    double weight_decay = 3e-4;
    double eps = 1e-8;
};

// Keeps per-parameter state keyed by name. Weight decay is classical L2: the
// decay term is added to the gradient before the update.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    const OptimizerConfig& config() const { return cfg_; }

    void step(const std::string& name, Tensor& param) {
        if (!param.has_grad())
            throw StateError("parameter '" + name + "' has no gradient");
        if (!all_finite(param.grad))
            throw NumericError("non-finite gradient on parameter '" + name + "'");
        State& st = states_[name];
        if (st.m.size() != param.values.size()) {
            st.m.assign(param.values.size(), 0.0);
            if (cfg_.kind == OptimizerKind::Adam) st.v.assign(param.values.size(), 0.0);
            st.t = 0;
        }
        st.t += 1;
        if (cfg_.kind == OptimizerKind::SgdMomentum) {
            for (std::size_t i = 0; i < param.values.size(); ++i) {
                const double grad = param.grad[i] + cfg_.weight_decay * param.values[i];
                st.m[i] = cfg_.momentum * st.m[i] + grad;
                param.values[i] -= cfg_.lr * st.m[i];
            }
        } else {
            const double bc1 = 1.0 - std::pow(cfg_.momentum, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
            for (std::size_t i = 0; i < param.values.size(); ++i) {
                const double grad = param.grad[i] + cfg_.weight_decay * param.values[i];
                st.m[i] = cfg_.momentum * st.m[i] + (1.0 - cfg_.momentum) * grad;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * grad * grad;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                param.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    struct State {
        std::vector<double> m;
        std::vector<double> v;
        std::int64_t t = 0;
    };
    OptimizerConfig cfg_;
    std::unordered_map<std::string, State> states_;
};

inline void optimizer_step(Optimizer& opt, const std::string& name, Tensor& param) {
    opt.step(name, param);
}

} // namespace nesbs
