#include "nesbs/evalkit.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace nesbs;

namespace {

SearchSpace space_do(int depth, int num_ops) {
    std::vector<OpKind> ops;
    const OpKind pool[3] = {OpKind::DenseRelu, OpKind::DenseTanh, OpKind::Identity};
    for (int i = 0; i < num_ops; ++i) ops.push_back(pool[i % 3]);
    return SearchSpace{depth, OpSet(ops)};
}

// Zero-weight net that always predicts the class its head bias favors.
StandaloneNet constant_net(int favored, int features) {
    SearchSpace sp = space_do(1, 3);
    StandaloneNet net(sp, ArchitectureId{{2}}, features, 4, 2, 1);
    for (double& v : net.stem_w.values) v = 0.0;
    for (double& v : net.head_w.values) v = 0.0;
    net.head_b.values = favored == 0 ? std::vector<double>{5.0, -5.0}
                                     : std::vector<double>{-5.0, 5.0};
    return net;
}

TEST(Retrain, IdentityChainTrainsOnlyStemAndHead) {
    SearchSpace sp = space_do(2, 3);
    Dataset data = make_synthetic("blobs", 64, 3);
    // arch {2,2} is identity-identity: no slot parameters exist at all
    StandaloneNet net(sp, ArchitectureId{{2, 2}}, data.features(), 4, 2, 5);
    int params = 0;
    net.for_each_param([&](const std::string&, Tensor&) { ++params; });
    EXPECT_EQ(params, 4); // stem w/b + head w/b
    for (const auto& slot : net.slots) EXPECT_FALSE(slot.has_value());
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    train_standalone(net, data, cfg); // must not throw
}

TEST(Retrain, MemberIndexChangesInitialization) {
    SearchSpace sp = space_do(2, 3);
    Dataset data = make_synthetic("blobs", 64, 3);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    const ArchitectureId arch{{0, 1}};
    std::vector<StandaloneNet> nets = retrain_members({arch, arch}, sp, 4, data, cfg, 7);
    ASSERT_EQ(nets.size(), 2u);
    EXPECT_NE(nets[0].stem_w.values, nets[1].stem_w.values);
}

TEST(Retrain, DeterministicPerSeed) {
    SearchSpace sp = space_do(2, 3);
    Dataset data = make_synthetic("blobs", 64, 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    auto run = [&] {
        return retrain_members({ArchitectureId{{0, 1}}}, sp, 4, data, cfg, 11)[0].stem_w.values;
    };
    EXPECT_EQ(run(), run());
}

TEST(Retrain, BlobsMembersReachHighAccuracy) {
    SearchSpace sp = space_do(2, 3);
    Dataset train_data = make_synthetic("blobs", 400, 13);
    Dataset test_data = make_synthetic("blobs", 400, 14);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    std::vector<ArchitectureId> members{{{0, 1}}, {{0, 0}}, {{2, 0}}};
    std::vector<StandaloneNet> nets = retrain_members(members, sp, 8, train_data, cfg, 17);
    for (auto& net : nets)
        EXPECT_GT(accuracy(net, test_data.inputs, test_data.labels), 0.95);
}

TEST(Ppd, IdenticalModelsGiveZero) {
    Dataset test_data = make_synthetic("blobs", 100, 5);
    StandaloneNet a = constant_net(0, test_data.features());
    std::vector<StandaloneNet> models{a, a, a};
    EXPECT_DOUBLE_EQ(ppd(models, test_data), 0.0);
}

TEST(Ppd, ComplementaryModelsGiveOne) {
    Dataset test_data = make_synthetic("blobs", 100, 5);
    std::vector<StandaloneNet> models{constant_net(0, test_data.features()),
                                      constant_net(1, test_data.features())};
    EXPECT_DOUBLE_EQ(ppd(models, test_data), 1.0);
}

TEST(Ppd, MatchesTripleLoopRecountOracle) {
    SearchSpace sp = space_do(2, 3);
    Dataset test_data = make_synthetic("moons", 150, 7);
    std::vector<StandaloneNet> models;
    for (std::uint64_t s : {1ull, 2ull, 3ull})
        models.emplace_back(sp, ArchitectureId{{0, 1}}, test_data.features(), 4, 2, s);

    const double got = ppd(models, test_data);

    // oracle: explicit triple loop over pairs and points
    std::vector<std::vector<int>> preds;
    for (auto& m : models) preds.push_back(m.predict(test_data.inputs));
    double want = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = a + 1; b < 3; ++b) {
            int differ = 0;
            for (int i = 0; i < test_data.size(); ++i)
                differ += preds[a][static_cast<std::size_t>(i)] != preds[b][static_cast<std::size_t>(i)];
            want += static_cast<double>(differ) / test_data.size();
            ++pairs;
        }
    want /= pairs;
    EXPECT_DOUBLE_EQ(got, want);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);

    // permutation invariance
    std::swap(models[0], models[2]);
    EXPECT_DOUBLE_EQ(ppd(models, test_data), want);
}

TEST(Ppd, FewerThanTwoModelsRejected) {
    Dataset test_data = make_synthetic("blobs", 50, 5);
    std::vector<StandaloneNet> one{constant_net(0, test_data.features())};
    EXPECT_THROW(ppd(one, test_data), ContractError);
}

TEST(EstimationQuality, PerfectAndReversedRankings) {
    std::vector<double> est{1, 2, 3, 4, 5, 6};
    std::vector<double> same{10, 20, 30, 40, 50, 60};
    EstimationQuality q = estimation_quality(est, same);
    EXPECT_NEAR(q.spearman, 1.0, 1e-12);
    std::vector<double> reversed{60, 50, 40, 30, 20, 10};
    EstimationQuality r = estimation_quality(est, reversed);
    EXPECT_NEAR(r.spearman, -1.0, 1e-12);
}

TEST(EstimationQuality, MatchesBruteForceOracle) {
    Rng rng(21);
    std::vector<double> est, truth;
    for (int i = 0; i < 20; ++i) {
        est.push_back(rng.normal());
        truth.push_back(rng.normal());
    }
    EstimationQuality q = estimation_quality(est, truth, 6);

    // Pearson oracle: direct covariance formula
    auto mean = [](const std::vector<double>& v) {
        double m = 0;
        for (double x : v) m += x / static_cast<double>(v.size());
        return m;
    };
    const double me = mean(est), mt = mean(truth);
    double cov = 0, ve = 0, vt = 0;
    for (int i = 0; i < 20; ++i) {
        cov += (est[static_cast<std::size_t>(i)] - me) * (truth[static_cast<std::size_t>(i)] - mt);
        ve += (est[static_cast<std::size_t>(i)] - me) * (est[static_cast<std::size_t>(i)] - me);
        vt += (truth[static_cast<std::size_t>(i)] - mt) * (truth[static_cast<std::size_t>(i)] - mt);
    }
    EXPECT_NEAR(q.pearson, cov / std::sqrt(ve * vt), 1e-10);

    // Spearman oracle: ranks by brute-force counting (distinct values whp)
    auto ranks = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            int less = 0;
            for (std::size_t j = 0; j < v.size(); ++j) less += v[j] < v[i];
            r[i] = less + 1;
        }
        return r;
    };
    const auto re = ranks(est);
    const auto rt = ranks(truth);
    const double mre = mean(re), mrt = mean(rt);
    double rcov = 0, rve = 0, rvt = 0;
    for (int i = 0; i < 20; ++i) {
        rcov += (re[static_cast<std::size_t>(i)] - mre) * (rt[static_cast<std::size_t>(i)] - mrt);
        rve += (re[static_cast<std::size_t>(i)] - mre) * (re[static_cast<std::size_t>(i)] - mre);
        rvt += (rt[static_cast<std::size_t>(i)] - mrt) * (rt[static_cast<std::size_t>(i)] - mrt);
    }
    EXPECT_NEAR(q.spearman, rcov / std::sqrt(rve * rvt), 1e-10);

    // agreement oracle: joint membership count of the 6 smallest
    auto top6 = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        return std::set<std::size_t>(idx.begin(), idx.begin() + 6);
    };
    const auto te = top6(est);
    const auto tt = top6(truth);
    int inter = 0;
    for (std::size_t i : te) inter += tt.count(i);
    EXPECT_DOUBLE_EQ(q.agreement_at_k, inter / 6.0);
}

TEST(EstimationQuality, ZeroVarianceRejected) {
    std::vector<double> flat{1, 1, 1, 1};
    std::vector<double> ok{1, 2, 3, 4};
    EXPECT_THROW(estimation_quality(flat, ok), NumericError);
    EXPECT_THROW(estimation_quality(ok, flat), NumericError);
}

struct AttackFixture {
    Dataset train_data = make_synthetic("moons", 300, 31);
    Dataset test_data = make_synthetic("moons", 200, 32);
    SearchSpace sp = space_do(2, 3);
    std::vector<StandaloneNet> models;

    explicit AttackFixture(std::uint64_t seed = 33) {
        TrainConfig cfg;
        cfg.epochs = 15;
        cfg.batch_size = 32;
        models = retrain_members({ArchitectureId{{0, 0}}, ArchitectureId{{0, 1}},
                                  ArchitectureId{{1, 0}}},
                                 sp, 8, train_data, cfg, seed);
    }
};

TEST(Fgsm, ZeroEpsilonLeavesInputsUnchanged) {
    AttackFixture f;
    Tensor adv = fgsm_attack(f.models[0], f.test_data.inputs, f.test_data.labels, 0.0);
    EXPECT_EQ(adv.values, f.test_data.inputs.values);
}

TEST(Fgsm, RespectsLInfBudgetCoordinatewise) {
    AttackFixture f;
    const double eps = 0.01;
    Tensor adv = fgsm_attack(f.models[0], f.test_data.inputs, f.test_data.labels, eps);
    for (std::size_t i = 0; i < adv.values.size(); ++i) {
        EXPECT_LE(std::abs(adv.values[i] - f.test_data.inputs.values[i]), eps + 1e-15);
        EXPECT_GE(adv.values[i], 0.0);
        EXPECT_LE(adv.values[i], 1.0);
    }
}

TEST(Fgsm, AttackDoesNotImproveAccuracy) {
    std::vector<double> deltas;
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        AttackFixture f(seed);
        const double clean = accuracy(f.models[0], f.test_data.inputs, f.test_data.labels);
        Tensor adv = fgsm_attack(f.models[0], f.test_data.inputs, f.test_data.labels, 0.05);
        deltas.push_back(accuracy(f.models[0], adv, f.test_data.labels) - clean);
    }
    EXPECT_LE(testutil::median(deltas), 0.0);
}

TEST(Pgd, SingleStepAtFullBudgetEqualsFgsm) {
    AttackFixture f;
    Tensor fgsm = fgsm_attack(f.models[1], f.test_data.inputs, f.test_data.labels, 0.01);
    Tensor pgd = pgd_attack(f.models[1], f.test_data.inputs, f.test_data.labels, 0.01, 0.01, 1);
    EXPECT_EQ(fgsm.values, pgd.values);
}

TEST(Pgd, ProjectionInvariantHoldsAlways) {
    AttackFixture f;
    const double eps = 0.01;
    Tensor adv =
        pgd_attack(f.models[2], f.test_data.inputs, f.test_data.labels, eps, 0.008, 40);
    for (std::size_t i = 0; i < adv.values.size(); ++i) {
        EXPECT_LE(std::abs(adv.values[i] - f.test_data.inputs.values[i]), eps + 1e-15);
        EXPECT_GE(adv.values[i], 0.0);
        EXPECT_LE(adv.values[i], 1.0);
    }
}

TEST(Pgd, AtLeastAsStrongAsFgsm) {
    std::vector<double> gaps;
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        AttackFixture f(seed);
        Tensor a_f = fgsm_attack(f.models[0], f.test_data.inputs, f.test_data.labels, 0.01);
        Tensor a_p =
            pgd_attack(f.models[0], f.test_data.inputs, f.test_data.labels, 0.01, 0.008, 40);
        const double acc_f = accuracy(f.models[0], a_f, f.test_data.labels);
        const double acc_p = accuracy(f.models[0], a_p, f.test_data.labels);
        gaps.push_back(acc_p - acc_f);
    }
    EXPECT_LE(testutil::median(gaps), 1e-12);
}

TEST(Protocol, IdenticalModelsGainNothingFromDefense) {
    AttackFixture f;
    std::vector<StandaloneNet> clones{f.models[0], f.models[0], f.models[0]};
    AttackReport rep = attack_defense_protocol(clones, f.test_data, AttackKind::Fgsm, {});
    ASSERT_EQ(rep.rounds.size(), 3u);
    for (const auto& r : rep.rounds)
        EXPECT_DOUBLE_EQ(r.attack_accuracy, r.defense_accuracy);
}

TEST(Protocol, ExactlyNRoundsEachMemberOnce) {
    AttackFixture f;
    AttackReport rep = attack_defense_protocol(f.models, f.test_data, AttackKind::Fgsm, {});
    ASSERT_EQ(rep.rounds.size(), f.models.size());
    for (std::size_t r = 0; r < rep.rounds.size(); ++r)
        EXPECT_EQ(rep.rounds[r].attacked_member, static_cast<int>(r));
    EXPECT_THROW(
        [&] {
            std::vector<StandaloneNet> one{f.models[0]};
            attack_defense_protocol(one, f.test_data, AttackKind::Fgsm, {});
        }(),
        ContractError);
}

TEST(Report, AteIsExactMeanOfMemberErrors) {
    AttackFixture f;
    EvalReport rep = evaluate_ensemble(f.models, f.test_data);
    double mean = 0.0;
    for (double e : rep.member_test_error) mean += e / 3.0;
    EXPECT_DOUBLE_EQ(rep.ate, mean);
    EXPECT_GE(rep.ppd_value, 0.0);
    EXPECT_LE(rep.ppd_value, 1.0);
    auto j = eval_report_json(rep);
    EXPECT_EQ(j["provenance"]["ate"], "independently-retrained");
}

TEST(Report, PredictionCsvShape) {
    AttackFixture f;
    std::ostringstream os;
    write_prediction_csv(os, f.models, f.test_data);
    std::istringstream is(os.str());
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "point,model0,model1,model2");
    int rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    EXPECT_EQ(rows, f.test_data.size());
}

TEST(Standalone, CheckpointRoundTrip) {
    testutil::TempDir tmp("standalone");
    AttackFixture f;
    f.models[0].save(tmp.path() / "m0");
    StandaloneNet back = StandaloneNet::load(tmp.path() / "m0");
    Rng rng(3);
    Tensor x = testutil::random_tensor({4, f.test_data.features()}, rng);
    EXPECT_EQ(back.logits(x).values, f.models[0].logits(x).values);
}

} // namespace
