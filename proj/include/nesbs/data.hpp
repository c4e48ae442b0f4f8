#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nesbs/error.hpp"
#include "nesbs/numkit.hpp"
#include "nesbs/rng.hpp"

#include <nlohmann/json.hpp>

namespace nesbs {

// Labeled dataset with features scaled to [0, 1]. Immutable after
// construction; safe for concurrent reads.
struct Dataset {
    Tensor inputs; // N x F
    std::vector<int> labels;
    int num_classes = 0;
    std::string provenance;

    int size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
    int features() const { return inputs.shape.size() == 2 ? inputs.shape[1] : 0; }

    void validate() const {
        if (size() <= 0) throw ContractError("dataset is empty");
        if (static_cast<int>(labels.size()) != size())
            throw ContractError("dataset label count does not match row count");
        if (!all_finite(inputs.values)) throw NumericError("dataset contains non-finite values");
        for (int y : labels)
            if (y < 0 || y >= num_classes)
                throw IndexError("label " + std::to_string(y) + " outside [0, " +
                                 std::to_string(num_classes) + ")");
    }

    // Row-subset copy (used for splits and scoring caps).
    Dataset take(const std::vector<int>& indices) const {
        Dataset out;
        out.num_classes = num_classes;
        out.provenance = provenance;
        out.inputs = Tensor::zeros({static_cast<int>(indices.size()), features()});
        out.labels.reserve(indices.size());
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const int src = indices[r];
            for (int c = 0; c < features(); ++c) out.inputs.at(static_cast<int>(r), c) = inputs.at(src, c);
            out.labels.push_back(labels[static_cast<std::size_t>(src)]);
        }
        return out;
    }

    Dataset batch(const std::vector<int>& order, std::size_t offset, std::size_t count) const {
        std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(offset),
                             order.begin() + static_cast<std::ptrdiff_t>(offset + count));
        return take(idx);
    }
};

// 70/30 partition of a source training set: the large side trains the
// supernet, the small side fits the posterior and scores ensembles.
struct SearchSplit {
    Dataset supernet_train;
    Dataset posterior_val;
    std::uint64_t seed = 0;
    std::vector<int> train_indices;
    std::vector<int> val_indices;
};

// -- IDX ---------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw IoError("truncated IDX file: " + path);
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

} // namespace detail

// MNIST-style IDX loader: big-endian headers, magic 2051 (images) and 2049
// (labels), pixel bytes scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot open IDX image file: " + images_path.string());
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("cannot open IDX label file: " + labels_path.string());

    const std::uint32_t img_magic = detail::read_be32(img, images_path.string());
    if (img_magic != 0x00000803u)
        throw FormatError("bad IDX image magic in " + images_path.string());
    const std::uint32_t lab_magic = detail::read_be32(lab, labels_path.string());
    if (lab_magic != 0x00000801u)
        throw FormatError("bad IDX label magic in " + labels_path.string());

    const std::uint32_t n_img = detail::read_be32(img, images_path.string());
    const std::uint32_t rows = detail::read_be32(img, images_path.string());
    const std::uint32_t cols = detail::read_be32(img, images_path.string());
    const std::uint32_t n_lab = detail::read_be32(lab, labels_path.string());
    if (n_img != n_lab)
        throw FormatError("IDX image/label count mismatch: " + std::to_string(n_img) + " vs " +
                          std::to_string(n_lab));
    if (n_img == 0) throw FormatError("empty IDX file: " + images_path.string());

    const std::size_t f = static_cast<std::size_t>(rows) * cols;
    Dataset ds;
    ds.provenance = "idx:" + images_path.filename().string();
    ds.inputs = Tensor::zeros({static_cast<int>(n_img), static_cast<int>(f)});
    std::vector<unsigned char> pix(f);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        img.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(f));
        if (!img) throw IoError("truncated IDX image payload: " + images_path.string());
        for (std::size_t j = 0; j < f; ++j)
            ds.inputs.values[static_cast<std::size_t>(i) * f + j] = pix[j] / 255.0;
    }
    ds.labels.resize(n_lab);
    int max_label = 0;
    for (std::uint32_t i = 0; i < n_lab; ++i) {
        unsigned char y;
        lab.read(reinterpret_cast<char*>(&y), 1);
        if (!lab) throw IoError("truncated IDX label payload: " + labels_path.string());
        ds.labels[i] = y;
        max_label = std::max(max_label, static_cast<int>(y));
    }
    ds.num_classes = std::max(max_label + 1, 2);
    ds.validate();
    return ds;
}

// -- synthetic tasks ----------------------------------------------------------

struct SyntheticOptions {
    int subpopulations = 3; // planted-hetero K
    double label_noise = 0.0;
};

namespace detail {

inline void minmax_scale(Tensor& x) {
    const int n = x.shape[0], f = x.shape[1];
    for (int c = 0; c < f; ++c) {
        double lo = x.at(0, c), hi = x.at(0, c);
        for (int r = 1; r < n; ++r) {
            lo = std::min(lo, x.at(r, c));
            hi = std::max(hi, x.at(r, c));
        }
        const double range = hi - lo;
        for (int r = 0; r < n; ++r) x.at(r, c) = range > 0 ? (x.at(r, c) - lo) / range : 0.0;
    }
}

// Planted decision rule for sub-population g at point (u0, u1) in [0,1]^2.
inline int planted_rule(int g, double u0, double u1) {
    const int base = g % 3;
    int y;
    switch (base) {
    case 0: y = u0 > 0.5 ? 1 : 0; break;
    case 1: y = u1 > 0.5 ? 1 : 0; break;
    default: y = (u0 - 0.5) * (u1 - 0.5) > 0 ? 1 : 0; break;
    }
    if ((g / 3) % 2 == 1) y = 1 - y;
    return y;
}

} // namespace detail

// Deterministic synthetic tasks. `planted-hetero` draws K sub-populations
// whose Bayes-optimal rules differ (axis thresholds and an XOR quadrant rule),
// so a single small network underfits some sub-population and ensembles pay.
inline Dataset make_synthetic(const std::string& kind, int n, std::uint64_t seed,
                              const SyntheticOptions& opt = {}) {
    if (n < 10) throw ConfigError("synthetic dataset needs n >= 10");
    Rng rng(seed);
    Dataset ds;
    ds.provenance = "synthetic:" + kind;
    if (kind == "blobs") {
        ds.num_classes = 2;
        ds.inputs = Tensor::zeros({n, 2});
        ds.labels.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int y = static_cast<int>(rng.below(2));
            const double cx = y == 0 ? -2.0 : 2.0;
            ds.inputs.at(i, 0) = rng.normal(cx, 0.4);
            ds.inputs.at(i, 1) = rng.normal(cx, 0.4);
            ds.labels[static_cast<std::size_t>(i)] = y;
        }
        detail::minmax_scale(ds.inputs);
    } else if (kind == "moons") {
        ds.num_classes = 2;
        ds.inputs = Tensor::zeros({n, 2});
        ds.labels.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int y = static_cast<int>(rng.below(2));
            const double t = rng.uniform() * M_PI;
            double x0, x1;
            if (y == 0) {
                x0 = std::cos(t);
                x1 = std::sin(t);
            } else {
                x0 = 1.0 - std::cos(t);
                x1 = 0.5 - std::sin(t);
            }
            ds.inputs.at(i, 0) = x0 + rng.normal(0.0, 0.1);
            ds.inputs.at(i, 1) = x1 + rng.normal(0.0, 0.1);
            ds.labels[static_cast<std::size_t>(i)] = y;
        }
        detail::minmax_scale(ds.inputs);
    } else if (kind == "planted-hetero") {
        const int k = opt.subpopulations;
        if (k < 1) throw ConfigError("planted-hetero needs at least one sub-population");
        ds.num_classes = 2;
        const int f = 2 + k;
        ds.inputs = Tensor::zeros({n, f});
        ds.labels.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int g = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
            const double u0 = rng.uniform();
            const double u1 = rng.uniform();
            ds.inputs.at(i, 0) = u0;
            ds.inputs.at(i, 1) = u1;
            ds.inputs.at(i, 2 + g) = 1.0;
            int y = detail::planted_rule(g, u0, u1);
            if (opt.label_noise > 0.0 && rng.uniform() < opt.label_noise) y = 1 - y;
            ds.labels[static_cast<std::size_t>(i)] = y;
        }
    } else {
        throw ConfigError("unknown synthetic dataset kind: " + kind);
    }
    ds.validate();
    return ds;
}

// -- split ---------------------------------------------------------------------

// Seeded shuffle then partition; floor(fraction * N) rows go to the supernet
// side, the remainder to the posterior/validation side.
inline SearchSplit split(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ConfigError("split fraction must be in (0, 1)");
    const int n = ds.size();
    const int n_train = static_cast<int>(fraction * n);
    if (n_train == 0 || n_train == n)
        throw ConfigError("split fraction " + std::to_string(fraction) + " leaves a side empty");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    SearchSplit out;
    out.seed = seed;
    out.train_indices.assign(order.begin(), order.begin() + n_train);
    out.val_indices.assign(order.begin() + n_train, order.end());
    out.supernet_train = ds.take(out.train_indices);
    out.posterior_val = ds.take(out.val_indices);
    return out;
}

inline SearchSplit split(const Dataset& ds, std::uint64_t seed) { return split(ds, 0.7, seed); }

// -- binary cache ---------------------------------------------------------------

inline std::string sha256_hex(const void* data, std::size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(digest_len * 2);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

// Cache layout: <stem>.bin holds inputs then labels as little-endian f64;
// <stem>.json is the sidecar manifest {n, f, c, sha256}.
inline void save_cache(const Dataset& ds, const std::filesystem::path& stem) {
    std::vector<double> blob = ds.inputs.values;
    blob.reserve(blob.size() + ds.labels.size());
    for (int y : ds.labels) blob.push_back(static_cast<double>(y));

    const std::size_t bytes = blob.size() * sizeof(double);
    std::ofstream bin(stem.string() + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write cache: " + stem.string() + ".bin");
    bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(bytes));
    bin.close();

    nlohmann::ordered_json manifest;
    manifest["n"] = ds.size();
    manifest["f"] = ds.features();
    manifest["c"] = ds.num_classes;
    manifest["sha256"] = sha256_hex(blob.data(), bytes);
    manifest["provenance"] = ds.provenance;
    std::ofstream side(stem.string() + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot write cache sidecar: " + stem.string() + ".json");
    side << manifest.dump(2) << "\n";
}

inline Dataset load_cache(const std::filesystem::path& stem) {
    std::ifstream side(stem.string() + ".json");
    if (!side) throw IoError("cannot open cache sidecar: " + stem.string() + ".json");
    nlohmann::json manifest = nlohmann::json::parse(side);
    const int n = manifest.at("n").get<int>();
    const int f = manifest.at("f").get<int>();
    const int c = manifest.at("c").get<int>();

    std::ifstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open cache: " + stem.string() + ".bin");
    std::vector<double> blob(static_cast<std::size_t>(n) * f + n);
    bin.read(reinterpret_cast<char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(double)));
    if (!bin) throw IoError("truncated cache: " + stem.string() + ".bin");
    if (sha256_hex(blob.data(), blob.size() * sizeof(double)) !=
        manifest.at("sha256").get<std::string>())
        throw FormatError("cache checksum mismatch: " + stem.string());

    Dataset ds;
    ds.num_classes = c;
    ds.provenance = manifest.value("provenance", std::string("cache"));
    ds.inputs = Tensor({n, f}, std::vector<double>(blob.begin(),
                                                   blob.begin() + static_cast<std::ptrdiff_t>(
                                                                      static_cast<std::size_t>(n) * f)));
    ds.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        ds.labels[static_cast<std::size_t>(i)] =
            static_cast<int>(blob[static_cast<std::size_t>(n) * f + i]);
    ds.validate();
    return ds;
}

} // namespace nesbs
