#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "sqm/synthetic.hpp"
#include "sqm/train.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace sqm;
using namespace sqm::train;
using ad::Tensor;
using sqm::testing::grad_check;
using sqm::testing::random_tensor;

TEST(Loss, MseExamplesAndGradient) {
    EXPECT_EQ(mse_loss(Tensor::from({3}, {1, 2, 3}), Tensor::from({3}, {1, 2, 3})).item(), 0.0);
    EXPECT_EQ(mse_loss(Tensor::from({2}, {1, -1}), Tensor::from({2}, {0, 0})).item(), 1.0);
    EXPECT_THROW(mse_loss(Tensor::zeros({2}), Tensor::zeros({3})), UsageError);

    auto pred = Tensor::from({4}, {0.5, -1.0, 2.0, 0.0}, true);
    auto target = Tensor::from({4}, {0.0, 1.0, 1.5, 0.25});
    ad::backward(mse_loss(pred, target));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(pred.grad()[i], 2.0 * (pred[i] - target[i]) / 4.0);

    std::mt19937_64 rng(1);
    auto p = random_tensor({7}, rng), t = random_tensor({7}, rng);
    EXPECT_LT(grad_check([&] { return mse_loss(p, t); }, {p, t}, 7, rng).max_rel_error, 1e-6);
}

TEST(Metrics, WorkedExample) {
    const std::vector<double> obs{1, 2, 3}, pred{1, 2, 2};
    EXPECT_DOUBLE_EQ(mae(obs, pred), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(rmse(obs, pred), std::sqrt(1.0 / 3.0));
    EXPECT_DOUBLE_EQ(*r2(obs, pred), 0.5);
}

TEST(Metrics, PerfectAndMeanPredictions) {
    const std::vector<double> obs{0.3, -1.2, 2.0, 0.7};
    EXPECT_EQ(mae(obs, obs), 0.0);
    EXPECT_EQ(rmse(obs, obs), 0.0);
    EXPECT_EQ(*r2(obs, obs), 1.0);
    const double m = std::accumulate(obs.begin(), obs.end(), 0.0) / 4.0;
    EXPECT_NEAR(*r2(obs, std::vector<double>(4, m)), 0.0, 1e-15);
}

TEST(Metrics, UndefinedAndInvalid) {
    EXPECT_FALSE(r2(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}).has_value());
    EXPECT_THROW(r2(std::vector<double>{1}, std::vector<double>{1}), UsageError);
    EXPECT_THROW(mae(std::vector<double>{1, 2}, std::vector<double>{1}), UsageError);
    EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), UsageError);
}

TEST(Metrics, OrderingAndPowerMeanProperties) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> obs(50), pred(50);
        for (std::size_t i = 0; i < 50; ++i) obs[i] = n(rng), pred[i] = obs[i] + 0.5 * n(rng);
        EXPECT_GE(rmse(obs, pred), mae(obs, pred));
        EXPECT_LE(*r2(obs, pred), 1.0);
        std::vector<std::size_t> perm(50);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> po, pp;
        for (auto i : perm) po.push_back(obs[i]), pp.push_back(pred[i]);
        EXPECT_NEAR(*r2(po, pp), *r2(obs, pred), 1e-12);
    }
}

TEST(Categories, TableBoundaries) {
    using C = DroughtCategory;
    EXPECT_EQ(categorize(-3.0), C::ExtremelyDry);
    EXPECT_EQ(categorize(-2.0), C::ExtremelyDry);
    EXPECT_EQ(categorize(std::nextafter(-2.0, 0.0)), C::SeverelyDry);
    EXPECT_EQ(categorize(-1.5), C::SeverelyDry);
    EXPECT_EQ(categorize(-1.0), C::ModeratelyDry);
    EXPECT_EQ(categorize(-0.999), C::NearNormal);
    EXPECT_EQ(categorize(0.0), C::NearNormal);
    EXPECT_EQ(categorize(1.0), C::NearNormal);
    EXPECT_EQ(categorize(1.5), C::ModeratelyWet);
    EXPECT_EQ(categorize(2.0), C::SeverelyWet);
    EXPECT_EQ(categorize(2.5), C::ExtremelyWet);
    EXPECT_EQ(categorize(3.0), C::ExtremelyWet);
    EXPECT_THROW(categorize(3.01), RangeError);
    EXPECT_THROW(categorize(-7.0), RangeError);
    EXPECT_THROW(categorize(std::nan("")), RangeError);
    EXPECT_EQ(category_name(categorize(-2.0)), "Extremely Dry");
    EXPECT_EQ(category_name(categorize(1.5)), "Moderately Wet");
}

model::NamedTensor named(Tensor& t) { return {"w", &t}; }

void set_grad(Tensor& p, double g) {
    p.zero_grad();
    ad::backward(ad::scale(ad::sum(p), g));
}

TEST(Optimizer, ZeroGradientNoDecayIsNoOp) {
    auto p = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    set_grad(p, 0.0);
    AdamW opt({.weight_decay = 0.0});
    std::vector<model::NamedTensor> params{named(p)};
    for (int i = 0; i < 5; ++i) opt.step(params, 1e-3);
    EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Optimizer, FirstStepClosedForm) {
    for (double g : {0.3, -2.0, 1e-4}) {
        auto p = Tensor::scalar(1.0, true);
        set_grad(p, g);
        AdamW opt({.weight_decay = 0.0});
        std::vector<model::NamedTensor> params{named(p)};
        opt.step(params, 1e-3);
        EXPECT_NEAR(p.item(), 1.0 - 1e-3 * g / (std::abs(g) + 1e-8), 1e-15);
        EXPECT_EQ(opt.steps(), 1u);
    }
}

TEST(Optimizer, DecoupledDecayIsGeometric) {
    auto p = Tensor::scalar(2.0, true);
    set_grad(p, 0.0);
    AdamW opt({.weight_decay = 0.01});
    std::vector<model::NamedTensor> params{named(p)};
    for (int i = 0; i < 10; ++i) opt.step(params, 0.1);
    EXPECT_NEAR(p.item(), 2.0 * std::pow(1.0 - 0.1 * 0.01, 10), 1e-15);
}

TEST(Optimizer, DecayAppliesBeforeMomentUpdate) {
    auto p = Tensor::scalar(3.0, true);
    set_grad(p, 0.5);
    AdamW opt(AdamWConfig{});
    std::vector<model::NamedTensor> params{named(p)};
    opt.step(params, 0.01);
    EXPECT_NEAR(p.item(), 3.0 * (1.0 - 0.01 * 0.01) - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
}

TEST(Optimizer, NonFiniteGradientAbortsWithName) {
    auto a = Tensor::scalar(1.0, true);
    auto b = Tensor::scalar(1.0, true);
    set_grad(a, 1.0);
    b.zero_grad();
    ad::backward(ad::scale(b, 1.0));
    // Poison b's gradient in place.
    b.node()->grad[0] = std::numeric_limits<double>::infinity();
    AdamW opt(AdamWConfig{});
    std::vector<model::NamedTensor> params{{"first", &a}, {"second", &b}};
    try {
        opt.step(params, 1e-3);
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
    }
    EXPECT_EQ(a.item(), 1.0);
    EXPECT_EQ(opt.steps(), 0u);
}

TEST(Schedule, CosineEndpoints) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 250), 1e-3);
    EXPECT_NEAR(cosine_lr(125, 250), 5e-4, 1e-18);
    EXPECT_LT(cosine_lr(249, 250), 1e-3 * 1e-4);
    EXPECT_GT(cosine_lr(249, 250), 0.0);
    EXPECT_THROW(cosine_lr(250, 250), UsageError);
    EXPECT_THROW(cosine_lr(-1, 250), UsageError);
    for (int e = 1; e < 250; ++e) EXPECT_LT(cosine_lr(e, 250), cosine_lr(e - 1, 250));
}

TEST(Batches, TrailingSingletonMerges) {
    auto r = batch_ranges(65, 32);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[1], (std::pair<std::size_t, std::size_t>{32, 65}));
    EXPECT_EQ(batch_ranges(64, 32).size(), 2u);
    EXPECT_EQ(batch_ranges(66, 32).back().second - batch_ranges(66, 32).back().first, 2u);
    EXPECT_EQ(batch_ranges(945, 32).size(), 30u);
}

TEST(Config, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.batch_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.max_epochs = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

// Small synthetic split for fast training tests: 8 years, 3/2/2 split years.
data::DatasetSplit small_split() {
    synthetic::SyntheticConfig sc;
    sc.first_year = 2000;
    sc.years = 8;
    const data::ClimateDataset ds(synthetic::generate(sc));
    data::SplitRanges ranges{2001, 2003, 2004, 2005, 2006, 2007};
    return data::build_splits(ds, data::GridCell::from_degrees(sc.center_lat, sc.center_lon), ranges);
}

std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), {});
}

TEST(Series, EmptyReportWritesHeaderOnly) {
    const auto path = tmp("sqm_series_empty.csv");
    emit_series(MetricsReport{}, path);
    EXPECT_EQ(slurp(path), "month,observed,predicted,category\n");
    EXPECT_TRUE(read_series(path).empty());
    std::filesystem::remove(path);
    EXPECT_THROW(emit_series(MetricsReport{}, "/nonexistent-dir/x.csv"), IoError);
}

TEST(Series, RoundTripAndTestMonthCount) {
    const data::ClimateDataset ds(synthetic::generate({}));
    const auto split = data::build_splits(ds, data::GridCell::from_degrees(-29.25, 153.25));
    auto params = model::init_params(3);
    const auto rep = evaluate(split.test, params, {.no_seb = false, .no_qltem = true});
    ASSERT_EQ(rep.series.size(), 216u);
    const auto path = tmp("sqm_series_test.csv");
    emit_series(rep, path);
    const auto back = read_series(path);
    ASSERT_EQ(back.size(), 216u);
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].month, rep.series[i].month);
        EXPECT_EQ(back[i].observed, rep.series[i].observed);
        EXPECT_EQ(back[i].predicted, rep.series[i].predicted);
    }
    EXPECT_EQ(back.front().month, (data::YearMonth{2006, 1}));
    // Recomputed metrics agree.
    const auto again = report_from_series(back);
    EXPECT_EQ(again.mae, rep.mae);
    EXPECT_EQ(again.rmse, rep.rmse);
    EXPECT_EQ(again.r2, rep.r2);
    std::filesystem::remove(path);
}

TEST(Training, SeededRunsAreBitIdentical) {
    const auto split = small_split();
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.seed = 11;
    for (model::Ablation flags : {model::Ablation{false, true}, model::Ablation{false, false}}) {
        cfg.flags = flags;
        auto a = sqm::train::train(split, cfg), b = sqm::train::train(split, cfg);
        const auto pa = tmp("sqm_det_a.bin"), pb = tmp("sqm_det_b.bin");
        model::save_checkpoint(pa, a.best, a.meta);
        model::save_checkpoint(pb, b.best, b.meta);
        EXPECT_EQ(slurp(pa), slurp(pb));
        ASSERT_EQ(a.log.size(), b.log.size());
        for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(to_json(a.log[i]).dump(), to_json(b.log[i]).dump());
        std::filesystem::remove(pa);
        std::filesystem::remove(pb);
    }
    cfg.seed = 12;
    auto c = sqm::train::train(split, cfg);
    cfg.seed = 11;
    auto d = sqm::train::train(split, cfg);
    EXPECT_NE(c.log.back().train_loss, d.log.back().train_loss);
}

TEST(Training, BestCheckpointReproducesValidationR2) {
    const auto split = small_split();
    TrainConfig cfg;
    cfg.max_epochs = 6;
    cfg.seed = 5;
    cfg.flags.no_qltem = true;
    auto res = sqm::train::train(split, cfg);
    ASSERT_TRUE(res.meta.val_r2.has_value());
    double best = -1e300;
    int best_epoch = -1;
    for (const auto& e : res.log)
        if (*e.val_r2 > best) best = *e.val_r2, best_epoch = e.epoch;
    EXPECT_EQ(res.meta.epoch, best_epoch);
    EXPECT_EQ(*res.meta.val_r2, best);
    const auto rep = evaluate(split.validation, res.best, cfg.flags);
    EXPECT_EQ(*rep.r2, *res.meta.val_r2);

    // Through a saved checkpoint as well.
    const auto path = tmp("sqm_best.bin");
    model::save_checkpoint(path, res.best, res.meta);
    auto ck = model::load_checkpoint(path);
    EXPECT_EQ(*evaluate(split.validation, ck.params, cfg.flags).r2, *res.meta.val_r2);
    std::filesystem::remove(path);
}

TEST(Training, AblationLeavesFrozenTensorsUntouched) {
    const auto split = small_split();
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.seed = 6;
    cfg.flags = {true, true};
    auto res = sqm::train::train(split, cfg);
    auto init = model::init_params(6);
    EXPECT_EQ(std::vector<double>(res.best.seb.kernel.values().begin(), res.best.seb.kernel.values().end()),
              std::vector<double>(init.seb.kernel.values().begin(), init.seb.kernel.values().end()));
    EXPECT_EQ(std::vector<double>(res.best.qltem[0].angles.values().begin(), res.best.qltem[0].angles.values().end()),
              std::vector<double>(init.qltem[0].angles.values().begin(), init.qltem[0].angles.values().end()));
    EXPECT_NE(res.best.ffb.fc_w[0], init.ffb.fc_w[0]);
}

TEST(Training, ConstantTargetDrivesLossTowardZero) {
    auto split = small_split();
    for (auto* part : {&split.train, &split.validation, &split.test})
        for (auto& s : *part) s.target = 0.7;
    TrainConfig cfg;
    cfg.max_epochs = 60;
    cfg.seed = 8;
    cfg.flags.no_qltem = true;
    auto res = sqm::train::train(split, cfg);
    ASSERT_FALSE(res.log.empty());
    EXPECT_FALSE(res.log.front().val_r2.has_value());
    EXPECT_LT(res.log.back().train_loss, 0.1 * res.log.front().train_loss);
    EXPECT_LT(res.log.back().val_loss, 0.2 * res.log.front().val_loss);
    // With R^2 undefined, the kept epoch has the lowest validation loss.
    double lowest = 1e300;
    for (const auto& e : res.log) lowest = std::min(lowest, e.val_loss);
    EXPECT_EQ(res.log[static_cast<std::size_t>(res.meta.epoch)].val_loss, lowest);
}

TEST(Training, DivergenceKeepsLastGoodCheckpoint) {
    const auto split = small_split();
    TrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.seed = 9;
    cfg.lr0 = 1e250;
    cfg.flags.no_qltem = true;
    auto res = sqm::train::train(split, cfg);
    EXPECT_TRUE(res.diverged);
    EXPECT_FALSE(res.message.empty());
    for (auto& nt : res.best.named())
        for (double v : nt.tensor->values()) ASSERT_TRUE(std::isfinite(v)) << nt.name;
}

TEST(Training, EarlyStoppingOnPlateau) {
    const auto split = small_split();
    TrainConfig cfg;
    cfg.max_epochs = 50;
    cfg.seed = 10;
    cfg.min_delta = 100.0;  // no later epoch can beat the first by this much
    cfg.patience = 3;
    cfg.flags.no_qltem = true;
    auto res = sqm::train::train(split, cfg);
    EXPECT_TRUE(res.early_stopped);
    EXPECT_EQ(res.log.size(), 4u);
}

TEST(Training, RejectsTinySplits) {
    data::DatasetSplit split;
    EXPECT_THROW(sqm::train::train(split, {}), ValidationError);
}

} // namespace
