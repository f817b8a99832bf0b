#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sqm/autodiff.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace sqm;
using namespace sqm::ad;
using sqm::testing::grad_check;
using sqm::testing::random_tensor;
using sqm::testing::weighted_sum;

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TEST(Linear, IdentityAndSummation) {
    auto x = Tensor::from({2}, {1, 2});
    auto y = linear(x, Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2}, {0, 0}));
    EXPECT_EQ(vals(y), (std::vector<double>{1, 2}));

    auto s = linear(Tensor::from({2}, {1, 1}), Tensor::from({2, 1}, {1, 1}), Tensor::from({1}, {0}));
    EXPECT_EQ(vals(s), (std::vector<double>{2}));
}

TEST(Linear, ShapeMismatchThrows) {
    EXPECT_THROW(linear(Tensor::zeros({3}), Tensor::zeros({2, 2}), Tensor::zeros({2})), DimensionError);
    EXPECT_THROW(linear(Tensor::zeros({2}), Tensor::zeros({2, 2}), Tensor::zeros({3})), DimensionError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(1);
    auto x = random_tensor({4, 3}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({5}, rng);
    auto up = random_tensor({4, 5}, rng, 1.0, false);
    auto rep = grad_check([&] { return weighted_sum(linear(x, w, b), up); }, {x, w, b}, 100, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_EQ(rep.checked, 12u + 15u + 5u);
}

TEST(Conv1d, IdentityKernelAndEdgePadding) {
    std::mt19937_64 rng(2);
    auto x = random_tensor({5, 2}, rng, 1.0, false);
    // Centre tap identity per channel.
    auto k = Tensor::zeros({3, 2, 2});
    k.mutable_values()[(1 * 2 + 0) * 2 + 0] = 1;
    k.mutable_values()[(1 * 2 + 1) * 2 + 1] = 1;
    EXPECT_EQ(vals(conv1d_temporal(x, k, Tensor::zeros({2}))), vals(x));

    auto ones = conv1d_temporal(Tensor::full({3, 1}, 1.0), Tensor::full({3, 1, 1}, 1.0), Tensor::zeros({1}));
    EXPECT_EQ(vals(ones), (std::vector<double>{2, 3, 2}));
    EXPECT_EQ(ones.shape(), (Shape{3, 1}));
}

TEST(Conv1d, EmptyOrMismatchedInputThrows) {
    EXPECT_THROW(conv1d_temporal(Tensor::zeros({3}), Tensor::zeros({3, 1, 1}), Tensor::zeros({1})), DimensionError);
    EXPECT_THROW(conv1d_temporal(Tensor::zeros({3, 2}), Tensor::zeros({3, 1, 1}), Tensor::zeros({1})), DimensionError);
    EXPECT_THROW(Tensor::zeros({0, 2}), DimensionError);
}

TEST(Conv1d, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    auto x = random_tensor({3, 7}, rng), k = random_tensor({3, 7, 4}, rng), b = random_tensor({4}, rng);
    auto up = random_tensor({3, 4}, rng, 1.0, false);
    auto rep = grad_check([&] { return weighted_sum(conv1d_temporal(x, k, b), up); }, {x, k, b}, 200, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(DepthwiseConv, HandEvaluatedCases) {
    auto corner = conv2d_depthwise(Tensor::full({1, 3, 3}, 1.0), Tensor::from({1, 2, 2}, {1, 0, 0, 0}),
                                   Tensor::zeros({1}));
    EXPECT_EQ(corner.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(vals(corner), (std::vector<double>(4, 1.0)));

    auto sums = conv2d_depthwise(Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), Tensor::full({1, 2, 2}, 1.0),
                                 Tensor::zeros({1}));
    EXPECT_EQ(vals(sums), (std::vector<double>{12, 16, 24, 28}));
}

TEST(DepthwiseConv, ChannelsAreIndependent) {
    std::mt19937_64 rng(4);
    auto x = random_tensor({3, 3, 3}, rng, 1.0, false);
    auto k = random_tensor({3, 2, 2}, rng, 1.0, false), b = random_tensor({3}, rng, 1.0, false);
    auto base = vals(conv2d_depthwise(x, k, b));
    auto x2 = x.clone();
    x2.mutable_values()[9 + 4] += 1.0;  // channel 1, centre
    auto moved = vals(conv2d_depthwise(x2, k, b));
    for (std::size_t i = 0; i < base.size(); ++i) {
        if (i / 4 == 1) continue;
        EXPECT_EQ(base[i], moved[i]) << i;
    }
    EXPECT_NE(base[4], moved[4]);
}

TEST(DepthwiseConv, TooSmallThrows) {
    EXPECT_THROW(conv2d_depthwise(Tensor::zeros({1, 1, 3}), Tensor::zeros({1, 2, 2}), Tensor::zeros({1})),
                 DimensionError);
}

TEST(DepthwiseConv, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    auto x = random_tensor({2, 3, 3, 3}, rng), k = random_tensor({3, 2, 2}, rng), b = random_tensor({3}, rng);
    auto up = random_tensor({2, 3, 2, 2}, rng, 1.0, false);
    auto rep = grad_check([&] { return weighted_sum(conv2d_depthwise(x, k, b), up); }, {x, k, b}, 100, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(MaxPool, ValuesAndTieBreaking) {
    EXPECT_EQ(maxpool_spatial(Tensor::from({1, 2, 2}, {1, 2, 3, 4})).item(), 4.0);

    auto x = Tensor::full({1, 2, 2}, 0.5, true);
    auto y = maxpool_spatial(x);
    EXPECT_EQ(y.item(), 0.5);
    backward(sum(y));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    auto x = random_tensor({4, 3, 2, 2}, rng);
    auto up = random_tensor({4, 3}, rng, 1.0, false);
    auto rep = grad_check([&] { return weighted_sum(maxpool_spatial(x), up); }, {x}, 100, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Activation, FixedPointsAndSlopes) {
    auto at = [](Activation a, double x) { return activation(a, Tensor::scalar(x)).item(); };
    EXPECT_DOUBLE_EQ(at(Activation::LeakyRelu02, -1.0), -0.2);
    EXPECT_DOUBLE_EQ(at(Activation::LeakyRelu02, 2.0), 2.0);
    EXPECT_EQ(at(Activation::ScaledTanh3, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(at(Activation::ScaledTanh3, 50.0), 3.0);
    EXPECT_LT(at(Activation::ScaledTanh3, 50.0), 3.0);
    EXPECT_GT(at(Activation::ScaledTanh3, -50.0), -3.0);
    EXPECT_EQ(at(Activation::ScaledTanh3, 50.0), std::nextafter(3.0, 0.0));
    EXPECT_EQ(at(Activation::Silu, 0.0), 0.0);
    EXPECT_EQ(at(Activation::Gelu, 0.0), 0.0);
    EXPECT_EQ(at(Activation::Elu, 0.0), 0.0);
    EXPECT_THROW(parse_activation("swish"), ConfigError);
    EXPECT_EQ(parse_activation("gelu"), Activation::Gelu);
}

TEST(Activation, ScaledTanhStaysInsideOpenInterval) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-15.0, 15.0);
    for (int i = 0; i < 10000; ++i) {
        const double y = activation(Activation::ScaledTanh3, Tensor::scalar(u(rng))).item();
        EXPECT_LT(std::abs(y), 3.0);
    }
}

TEST(Activation, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(8);
    for (auto kind : {Activation::LeakyRelu02, Activation::Silu, Activation::Elu, Activation::Gelu,
                      Activation::Sigmoid, Activation::Tanh, Activation::ScaledTanh3, Activation::Softplus}) {
        auto x = random_tensor({100}, rng);
        // Keep clear of the kinks at zero.
        for (auto& v : x.mutable_values())
            if (std::abs(v) < 1e-3) v = 0.5;
        auto up = random_tensor({100}, rng, 1.0, false);
        auto rep = grad_check([&] { return weighted_sum(activation(kind, x), up); }, {x}, 100, rng);
        EXPECT_LT(rep.max_rel_error, 1e-4) << static_cast<int>(kind);
    }
}

TEST(BatchNorm, NormalizedBatchPassesThrough) {
    // Two rows, zero mean and unit population variance per channel.
    auto x = Tensor::from({2, 2}, {1, -1, -1, 1});
    BatchNormStats st(2);
    auto y = batchnorm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), st, Mode::Train);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    std::mt19937_64 rng(9);
    auto x = random_tensor({4, 3}, rng, 1.0, false);
    BatchNormStats st(3);
    auto y = batchnorm(x, Tensor::zeros({3}), Tensor::from({3}, {1, 2, 3}), st, Mode::Train);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], double(i % 3 + 1));
}

TEST(BatchNorm, RunningStatsAndEvalMode) {
    auto x = Tensor::from({2, 1}, {1.0, 3.0});
    BatchNormStats st(1);
    batchnorm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), st, Mode::Train);
    EXPECT_DOUBLE_EQ(st.running_mean[0], 0.2);             // 0.9*0 + 0.1*2
    EXPECT_DOUBLE_EQ(st.running_var[0], 0.9 + 0.1 * 2.0);  // unbiased variance 2
    auto y = batchnorm(Tensor::from({1, 1}, {0.2}), Tensor::full({1}, 1.0), Tensor::zeros({1}), st, Mode::Eval);
    EXPECT_NEAR(y.item(), 0.0, 1e-15);
}

TEST(BatchNorm, TrainModeNeedsTwoRows) {
    BatchNormStats st(2);
    EXPECT_THROW(batchnorm(Tensor::zeros({1, 2}), Tensor::zeros({2}), Tensor::zeros({2}), st, Mode::Train), BatchError);
    EXPECT_NO_THROW(batchnorm(Tensor::zeros({1, 2}), Tensor::zeros({2}), Tensor::zeros({2}), st, Mode::Eval));
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(10);
    auto x = random_tensor({4, 3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
    auto up = random_tensor({4, 3, 5}, rng, 1.0, false);
    for (auto mode : {Mode::Train, Mode::Eval}) {
        BatchNormStats st(5);
        st.running_mean = {0.1, -0.2, 0.3, 0.0, 0.5};
        st.running_var = {1.5, 0.7, 2.0, 1.0, 0.3};
        auto rep = grad_check(
            [&] {
                BatchNormStats scratch = st;
                return weighted_sum(batchnorm(x, g, b, scratch, mode), up);
            },
            {x, g, b}, 100, rng);
        EXPECT_LT(rep.max_rel_error, 1e-4);
    }
}

TEST(Dropout, EvalAndZeroProbabilityAreIdentity) {
    std::mt19937_64 rng(11);
    auto x = random_tensor({50}, rng, 1.0, false);
    EXPECT_EQ(vals(dropout(x, 0.2, Mode::Eval, rng)), vals(x));
    EXPECT_EQ(vals(dropout(x, 0.0, Mode::Train, rng)), vals(x));
    EXPECT_THROW(dropout(x, 1.0, Mode::Train, rng), ConfigError);
    EXPECT_THROW(dropout(x, -0.1, Mode::Eval, rng), ConfigError);
}

TEST(Dropout, KeepRateAndScaling) {
    std::mt19937_64 rng(12);
    auto y = dropout(Tensor::full({100000}, 1.0), 0.2, Mode::Train, rng);
    std::size_t kept = 0;
    for (double v : y.values()) {
        if (v != 0.0) {
            ++kept;
            EXPECT_DOUBLE_EQ(v, 1.25);
        }
    }
    EXPECT_NEAR(kept / 1e5, 0.8, 0.01);
}

TEST(Backward, ScalarRulesAndAccumulation) {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(x));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
    backward(sum(x));
    EXPECT_EQ(x.grad()[0], 2.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());

    auto s = Tensor::scalar(3.0, true);
    backward(mul(s, s));
    EXPECT_EQ(s.grad()[0], 6.0);

    EXPECT_THROW(backward(x), UsageError);
}

TEST(Backward, SharedSubgraphVisitedOnce) {
    auto x = Tensor::scalar(2.0, true);
    auto y = mul(x, x);            // 4
    auto z = add(y, mul(y, x));    // y + y*x
    backward(z);                   // d/dx (x^2 + x^3) = 2x + 3x^2 = 16
    EXPECT_EQ(x.grad()[0], 16.0);
}

TEST(Backward, RepeatedPassesAreDeterministic) {
    std::mt19937_64 rng(13);
    auto x = random_tensor({6, 4}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
    auto run = [&] {
        x.zero_grad(), w.zero_grad(), b.zero_grad();
        backward(sum(activation(Activation::Gelu, linear(x, w, b))));
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(ShapeOps, ReshapeConcatSliceRoundTrip) {
    std::mt19937_64 rng(14);
    auto x = random_tensor({2, 6, 3}, rng);
    auto parts = std::vector<Tensor>{slice(x, 1, 0, 2), slice(x, 1, 2, 5), slice(x, 1, 5, 6)};
    auto back = concat(parts, 1);
    EXPECT_EQ(back.shape(), x.shape());
    EXPECT_EQ(vals(back), vals(x));
    EXPECT_EQ(vals(reshape(x, {36})), vals(x));
    EXPECT_THROW(reshape(x, {35}), DimensionError);

    auto up = random_tensor({4, 9}, rng, 1.0, false);
    auto rep = grad_check(
        [&] {
            auto p = std::vector<Tensor>{slice(x, 1, 0, 2), slice(x, 1, 2, 5), slice(x, 1, 5, 6)};
            return weighted_sum(reshape(concat(p, 1), {4, 9}), up);
        },
        {x}, 36, rng);
    EXPECT_LT(rep.max_rel_error, 1e-8);
    // Reshape backward is the gradient reshaped.
    x.zero_grad();
    backward(weighted_sum(reshape(x, {4, 9}), up));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), vals(up));
}

TEST(ShapeOps, ElementwiseAndReductions) {
    std::mt19937_64 rng(15);
    auto a = random_tensor({5}, rng), b = random_tensor({5}, rng);
    auto rep = grad_check([&] { return mean(mul(add(a, scale(b, 2.0)), a)); }, {a, b}, 5, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_THROW(add(a, Tensor::zeros({4})), DimensionError);
}

TEST(Tensor, NonFiniteResultsAreRejected) {
    EXPECT_THROW(mul(Tensor::scalar(1e200), Tensor::scalar(1e200)), NonFiniteError);
}

} // namespace
