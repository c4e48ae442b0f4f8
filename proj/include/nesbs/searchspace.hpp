#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nesbs/data.hpp"
#include "nesbs/error.hpp"
#include "nesbs/numkit.hpp"
#include "nesbs/rng.hpp"

#include <nlohmann/json.hpp>

namespace nesbs {

enum class OpKind { DenseRelu, DenseTanh, Identity };

inline const char* op_name(OpKind k) {
    switch (k) {
    case OpKind::DenseRelu: return "dense-relu";
    case OpKind::DenseTanh: return "dense-tanh";
    default: return "identity";
    }
}

inline OpKind op_from_name(const std::string& name) {
    if (name == "dense-relu") return OpKind::DenseRelu;
    if (name == "dense-tanh") return OpKind::DenseTanh;
    if (name == "identity") return OpKind::Identity;
    throw ConfigError("unknown operation: " + name);
}

inline bool op_is_parametric(OpKind k) { return k != OpKind::Identity; }

// Ordered operation set; indices into it are stable for the lifetime of a run.
struct OpSet {
    std::vector<OpKind> ops;

    OpSet() = default;
    explicit OpSet(std::vector<OpKind> o) : ops(std::move(o)) {
        if (ops.empty()) throw ConfigError("operation set may not be empty");
    }
    static OpSet standard() {
        return OpSet({OpKind::DenseRelu, OpKind::DenseTanh, OpKind::Identity});
    }
    static OpSet from_names(const std::vector<std::string>& names) {
        std::vector<OpKind> o;
        o.reserve(names.size());
        for (const auto& n : names) o.push_back(op_from_name(n));
        return OpSet(std::move(o));
    }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(ops.size());
        for (OpKind k : ops) out.emplace_back(op_name(k));
        return out;
    }
    int size() const { return static_cast<int>(ops.size()); }
    OpKind operator[](int i) const { return ops[static_cast<std::size_t>(i)]; }
};

// One candidate network: an operation index per decision slot.
struct ArchitectureId {
    std::vector<int> ops;

    bool operator==(const ArchitectureId&) const = default;
    auto operator<=>(const ArchitectureId&) const = default;

    // dash-joined indices, e.g. "0-2-1-0"
    std::string str() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < ops.size(); ++i) os << (i ? "-" : "") << ops[i];
        return os.str();
    }
    static ArchitectureId parse(const std::string& s) {
        ArchitectureId a;
        std::istringstream is(s);
        std::string tok;
        while (std::getline(is, tok, '-')) a.ops.push_back(std::stoi(tok));
        return a;
    }
};

struct ArchitectureIdHash {
    std::size_t operator()(const ArchitectureId& a) const {
        std::size_t h = 0xcbf29ce484222325ULL;
        for (int o : a.ops) {
            h ^= static_cast<std::size_t>(o) + 1;
            h *= 0x100000001b3ULL;
        }
        return h;
    }
};

// Chain-structured space: D decision slots, each choosing one op from the set.
struct SearchSpace {
    int depth = 4;
    OpSet opset = OpSet::standard();

    std::uint64_t size() const {
        std::uint64_t n = 1;
        for (int i = 0; i < depth; ++i) {
            n *= static_cast<std::uint64_t>(opset.size());
            if (n > 100'000'000ull) return n; // saturate, callers gate on caps
        }
        return n;
    }

    void validate_arch(const ArchitectureId& a) const {
        if (static_cast<int>(a.ops.size()) != depth)
            throw ContractError("architecture depth " + std::to_string(a.ops.size()) +
                                " does not match space depth " + std::to_string(depth));
        for (int o : a.ops)
            if (o < 0 || o >= opset.size())
                throw ContractError("op index " + std::to_string(o) + " outside operation set");
    }

    // Complete lexicographic enumeration (feasible at desk scale only).
    std::vector<ArchitectureId> enumerate(std::uint64_t cap = 1'000'000) const {
        if (size() > cap)
            throw CapacityError("search space of size " + std::to_string(size()) +
                                " exceeds enumeration cap " + std::to_string(cap));
        std::vector<ArchitectureId> out;
        out.reserve(static_cast<std::size_t>(size()));
        ArchitectureId cur;
        cur.ops.assign(static_cast<std::size_t>(depth), 0);
        while (true) {
            out.push_back(cur);
            int i = depth - 1;
            while (i >= 0 && cur.ops[static_cast<std::size_t>(i)] == opset.size() - 1) {
                cur.ops[static_cast<std::size_t>(i)] = 0;
                --i;
            }
            if (i < 0) break;
            ++cur.ops[static_cast<std::size_t>(i)];
        }
        return out;
    }

    // Each slot sampled independently and uniformly, so every architecture
    // has probability |O|^-D.
    ArchitectureId sample_uniform(Rng& rng) const {
        ArchitectureId a;
        a.ops.reserve(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i)
            a.ops.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(opset.size()))));
        return a;
    }
};

struct DenseParams {
    Tensor w;
    Tensor b;
};

// Weight-sharing supernet over the chain space: a shared stem and head plus a
// parameter bank per parametric (slot, op) pair. Identity slots have no bank.
class Supernet {
public:
    SearchSpace space;
    int input_dim = 0;
    int hidden = 16;
    int classes = 2;

    Tensor stem_w, stem_b;
    std::vector<std::vector<std::optional<DenseParams>>> banks; // [slot][op]
    Tensor head_w, head_b;

    std::uint64_t step_count = 0;
    std::map<ArchitectureId, std::uint64_t> visit_ledger;
    bool frozen = false;

    Supernet() = default;

    Supernet(SearchSpace sp, int in_dim, int h, int c, std::uint64_t seed)
        : space(std::move(sp)), input_dim(in_dim), hidden(h), classes(c) {
        Rng rng(seed);
        stem_w = glorot(in_dim, h, rng);
        stem_b = Tensor::zeros({h});
        banks.resize(static_cast<std::size_t>(space.depth));
        for (int s = 0; s < space.depth; ++s) {
            banks[static_cast<std::size_t>(s)].resize(static_cast<std::size_t>(space.opset.size()));
            for (int o = 0; o < space.opset.size(); ++o)
                if (op_is_parametric(space.opset[o]))
                    banks[static_cast<std::size_t>(s)][static_cast<std::size_t>(o)] =
                        DenseParams{glorot(h, h, rng), Tensor::zeros({h})};
        }
        head_w = glorot(h, c, rng);
        head_b = Tensor::zeros({c});
    }

    DenseParams& bank(int slot, int op) {
        auto& cell = banks.at(static_cast<std::size_t>(slot)).at(static_cast<std::size_t>(op));
        if (!cell) throw ContractError("identity op has no parameter bank");
        return *cell;
    }
    const DenseParams& bank(int slot, int op) const {
        return const_cast<Supernet*>(this)->bank(slot, op);
    }

    static std::string bank_name(int slot, int op, const char* which) {
        return "slot" + std::to_string(slot) + "_op" + std::to_string(op) + "_" + which;
    }

    // Visits every named parameter in a fixed order.
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn("stem_w", stem_w);
        fn("stem_b", stem_b);
        for (int s = 0; s < space.depth; ++s)
            for (int o = 0; o < space.opset.size(); ++o)
                if (banks[static_cast<std::size_t>(s)][static_cast<std::size_t>(o)]) {
                    auto& p = *banks[static_cast<std::size_t>(s)][static_cast<std::size_t>(o)];
                    fn(bank_name(s, o, "w"), p.w);
                    fn(bank_name(s, o, "b"), p.b);
                }
        fn("head_w", head_w);
        fn("head_b", head_b);
    }

    // Parameters participating in one architecture: stem, head, and the
    // selected slot banks only.
    template <typename Fn>
    void for_each_arch_param(const ArchitectureId& arch, Fn&& fn) {
        fn("stem_w", stem_w);
        fn("stem_b", stem_b);
        for (int s = 0; s < space.depth; ++s) {
            const int o = arch.ops[static_cast<std::size_t>(s)];
            if (banks[static_cast<std::size_t>(s)][static_cast<std::size_t>(o)]) {
                auto& p = *banks[static_cast<std::size_t>(s)][static_cast<std::size_t>(o)];
                fn(bank_name(s, o, "w"), p.w);
                fn(bank_name(s, o, "b"), p.b);
            }
        }
        fn("head_w", head_w);
        fn("head_b", head_b);
    }

    // Architecture-conditional forward pass: stem -> selected op per slot ->
    // head. Only the selected banks are recorded on the tape, so backward
    // reaches exactly this architecture's parameters. Frozen supernets record
    // constants instead and take no gradients.
    Tape::NodeId forward(Tape& tape, const ArchitectureId& arch, const Tensor& batch) {
        space.validate_arch(arch);
        auto leaf = [&](Tensor& t) { return frozen ? tape.constant(t) : tape.param(t); };
        Tape::NodeId x = tape.constant(batch);
        Tape::NodeId h = forward_dense(tape, x, leaf(stem_w), leaf(stem_b));
        for (int s = 0; s < space.depth; ++s) {
            const int o = arch.ops[static_cast<std::size_t>(s)];
            switch (space.opset[o]) {
            case OpKind::Identity:
                break;
            case OpKind::DenseRelu: {
                auto& p = bank(s, o);
                h = tape.relu(forward_dense(tape, h, leaf(p.w), leaf(p.b)));
                break;
            }
            case OpKind::DenseTanh: {
                auto& p = bank(s, o);
                h = tape.tanh_(forward_dense(tape, h, leaf(p.w), leaf(p.b)));
                break;
            }
            }
        }
        return forward_dense(tape, h, leaf(head_w), leaf(head_b));
    }

    Tensor logits(const ArchitectureId& arch, const Tensor& batch) {
        Tape tape;
        return tape.value(forward(tape, arch, batch));
    }

    void record_visit(const ArchitectureId& arch) {
        ++visit_ledger[arch];
        ++step_count;
    }

    void freeze() { frozen = true; }

    // -- checkpoint -------------------------------------------------------------

    void save(const std::filesystem::path& dir) {
        std::filesystem::create_directories(dir);
        nlohmann::ordered_json m;
        m["D"] = space.depth;
        m["opset"] = space.opset.names();
        m["H"] = hidden;
        m["C"] = classes;
        m["input_dim"] = input_dim;
        m["step_count"] = step_count;
        m["frozen"] = frozen;
        nlohmann::ordered_json ledger = nlohmann::ordered_json::object();
        for (const auto& [arch, count] : visit_ledger) ledger[arch.str()] = count;
        m["visit_ledger"] = ledger;
        std::ofstream mf(dir / "manifest.json", std::ios::trunc);
        if (!mf) throw IoError("cannot write supernet manifest: " + dir.string());
        mf << m.dump(2) << "\n";
        for_each_param([&](const std::string& name, Tensor& t) {
            write_raw(dir / (name + ".f64"), t.values);
        });
    }

    static Supernet load(const std::filesystem::path& dir) {
        std::ifstream mf(dir / "manifest.json");
        if (!mf) throw IoError("cannot open supernet manifest: " + (dir / "manifest.json").string());
        nlohmann::json m = nlohmann::json::parse(mf);
        SearchSpace sp;
        sp.depth = m.at("D").get<int>();
        sp.opset = OpSet::from_names(m.at("opset").get<std::vector<std::string>>());
        Supernet net(sp, m.at("input_dim").get<int>(), m.at("H").get<int>(), m.at("C").get<int>(),
                     /*seed=*/0);
        net.step_count = m.at("step_count").get<std::uint64_t>();
        net.frozen = m.value("frozen", false);
        for (auto it = m.at("visit_ledger").begin(); it != m.at("visit_ledger").end(); ++it)
            net.visit_ledger[ArchitectureId::parse(it.key())] = it.value().get<std::uint64_t>();
        net.for_each_param([&](const std::string& name, Tensor& t) {
            read_raw(dir / (name + ".f64"), t.values);
        });
        return net;
    }

    // Checksum over all parameter values, for freeze-stability checks.
    std::string param_checksum() {
        std::string blob;
        for_each_param([&](const std::string&, Tensor& t) {
            blob.append(reinterpret_cast<const char*>(t.values.data()),
                        t.values.size() * sizeof(double));
        });
        return sha256_hex(blob);
    }

private:
    static Tensor glorot(int fan_in, int fan_out, Rng& rng) {
        Tensor t = Tensor::zeros({fan_in, fan_out});
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& v : t.values) v = rng.uniform(-a, a);
        return t;
    }

    static void write_raw(const std::filesystem::path& p, const std::vector<double>& v) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + p.string());
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    }

    static void read_raw(const std::filesystem::path& p, std::vector<double>& v) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError("cannot open " + p.string());
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!in) throw IoError("truncated parameter file " + p.string());
    }
};

} // namespace nesbs
