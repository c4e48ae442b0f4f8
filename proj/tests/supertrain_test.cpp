#include "nesbs/supertrain.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace nesbs;

namespace {

SearchSpace relu_space(int depth, int num_ops) {
    std::vector<OpKind> ops;
    const OpKind pool[3] = {OpKind::DenseRelu, OpKind::DenseTanh, OpKind::Identity};
    for (int i = 0; i < num_ops; ++i) ops.push_back(pool[i % 3]);
    return SearchSpace{depth, OpSet(ops)};
}

double dataset_loss(Supernet& net, const ArchitectureId& arch, const Dataset& data) {
    Tape tape;
    auto loss = activations_and_loss(tape, net.forward(tape, arch, data.inputs), data.labels);
    return tape.value(loss).values[0];
}

TEST(TrainStep, DegenerateSpaceEqualsPlainSgd) {
    // |O|=1: every step trains the single architecture, so the supernet step
    // must match a manually driven step on the same network.
    SearchSpace sp = relu_space(2, 1);
    Dataset data = make_synthetic("blobs", 64, 3);
    Supernet a(sp, data.features(), 4, 2, 9);
    Supernet b(sp, data.features(), 4, 2, 9);

    Optimizer opt_a({OptimizerKind::SgdMomentum, 0.05, 0.9, 0.999, 3e-4});
    Rng rng(5);
    const double loss_a = train_step(a, data, rng, opt_a);

    // manual single-network step on b
    const ArchitectureId arch{{0, 0}};
    Optimizer opt_b({OptimizerKind::SgdMomentum, 0.05, 0.9, 0.999, 3e-4});
    b.for_each_arch_param(arch, [](const std::string&, Tensor& t) {
        t.ensure_grad();
        t.zero_grad();
    });
    Tape tape;
    auto loss_node = activations_and_loss(tape, b.forward(tape, arch, data.inputs), data.labels);
    const double loss_b = tape.value(loss_node).values[0];
    tape.backward(loss_node);
    b.for_each_arch_param(arch, [&](const std::string& name, Tensor& t) { opt_b.step(name, t); });

    EXPECT_DOUBLE_EQ(loss_a, loss_b);
    EXPECT_EQ(a.stem_w.values, b.stem_w.values);
    EXPECT_EQ(a.bank(0, 0).w.values, b.bank(0, 0).w.values);
}

TEST(TrainStep, UntouchedBanksBitIdentical) {
    SearchSpace sp = relu_space(2, 2);
    Dataset data = make_synthetic("blobs", 32, 3);
    Supernet net(sp, data.features(), 4, 2, 9);

    // find a seed whose first sample is arch {0,0} so banks (.,1) stay put
    Rng rng(1);
    std::vector<std::vector<double>> before;
    for (int s = 0; s < 2; ++s)
        for (int o = 0; o < 2; ++o) before.push_back(net.bank(s, o).w.values);

    Optimizer opt({OptimizerKind::SgdMomentum, 0.05, 0.9, 0.999, 3e-4});
    ArchitectureId sampled;
    train_step(net, data, rng, opt, &sampled);

    std::size_t idx = 0;
    for (int s = 0; s < 2; ++s)
        for (int o = 0; o < 2; ++o, ++idx) {
            if (o == sampled.ops[static_cast<std::size_t>(s)])
                EXPECT_NE(net.bank(s, o).w.values, before[idx]) << "selected bank should move";
            else
                EXPECT_EQ(net.bank(s, o).w.values, before[idx]) << "unselected bank must not move";
        }
}

TEST(TrainStep, LossImprovesOnBlobs) {
    std::vector<double> deltas;
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        Dataset data = make_synthetic("blobs", 64, seed);
        Supernet net(relu_space(2, 2), data.features(), 8, 2, seed);
        const ArchitectureId probe{{0, 0}};
        const double before = dataset_loss(net, probe, data);
        Optimizer opt({OptimizerKind::SgdMomentum, 0.05, 0.9, 0.999, 3e-4});
        Rng rng(seed);
        for (int i = 0; i < 200; ++i) train_step(net, data, rng, opt);
        deltas.push_back(dataset_loss(net, probe, data) - before);
    }
    EXPECT_LT(testutil::median(deltas), 0.0);
}

TEST(Train, CosineScheduleEndpointsAndLogLength) {
    Dataset data = make_synthetic("blobs", 100, 7);
    SearchSplit sp = split(data, 0.7, 7);
    Supernet net(relu_space(2, 2), data.features(), 4, 2, 11);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr = 0.1;
    cfg.seed = 21;
    TrainLog log = train(net, sp.supernet_train, cfg);

    const std::uint64_t steps_per_epoch = (70 + 15) / 16; // ceil(70/16) = 5
    EXPECT_EQ(log.steps.size(), steps_per_epoch * 3);
    EXPECT_DOUBLE_EQ(log.steps.front().lr, 0.1);
    EXPECT_LT(log.steps.back().lr, 0.1 * 0.05);
    EXPECT_TRUE(net.frozen);
    EXPECT_EQ(net.step_count, log.steps.size());

    std::ostringstream csv;
    log.write_csv(csv);
    EXPECT_NE(csv.str().find("step,sampled_arch,loss,lr"), std::string::npos);
}

TEST(Train, DeterministicReplay) {
    auto run = [] {
        Dataset data = make_synthetic("moons", 80, 13);
        Supernet net(relu_space(3, 3), data.features(), 4, 2, 17);
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.seed = 99;
        train(net, data, cfg);
        return net.param_checksum();
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, FrozenSupernetRejectsFurtherSteps) {
    Dataset data = make_synthetic("blobs", 32, 3);
    Supernet net(relu_space(2, 2), data.features(), 4, 2, 9);
    net.freeze();
    Optimizer opt({OptimizerKind::SgdMomentum, 0.05, 0.9, 0.999, 3e-4});
    Rng rng(1);
    EXPECT_THROW(train_step(net, data, rng, opt), StateError);
}

TEST(Fairness, RoundRobinLedgerHasZeroDeviation) {
    SearchSpace sp = relu_space(2, 2);
    std::map<ArchitectureId, std::uint64_t> ledger;
    for (const auto& arch : sp.enumerate()) ledger[arch] = 25; // perfectly fair
    FairnessReport rep = fairness_report(ledger, sp);
    EXPECT_DOUBLE_EQ(rep.max_arch_deviation, 0.0);
    EXPECT_DOUBLE_EQ(rep.max_slot_deviation, 0.0);
    EXPECT_DOUBLE_EQ(rep.chi_square, 0.0);
    EXPECT_TRUE(rep.pass);
}

TEST(Fairness, AdversarialLedgerFails) {
    SearchSpace sp = relu_space(2, 2);
    std::map<ArchitectureId, std::uint64_t> ledger;
    ledger[ArchitectureId{{0, 0}}] = 1000; // one arch always
    FairnessReport rep = fairness_report(ledger, sp);
    EXPECT_NEAR(rep.max_arch_deviation, 1.0 - 1.0 / 4.0, 1e-12);
    EXPECT_FALSE(rep.pass);
}

TEST(Fairness, UniformSamplingPassesAtFortyThousandSteps) {
    // ledger-only check (no network updates): 40k uniform samples, |O|=3,
    // binomial std ~= 0.0024 per slot-op, 4 sigma inside 0.01
    SearchSpace sp = relu_space(4, 3);
    Rng rng(12345);
    std::map<ArchitectureId, std::uint64_t> ledger;
    for (int i = 0; i < 40000; ++i) ledger[sp.sample_uniform(rng)]++;
    FairnessReport rep = fairness_report(ledger, sp, 0.01);
    EXPECT_LT(rep.max_slot_deviation, 0.01);
    EXPECT_TRUE(rep.pass);
}

} // namespace
