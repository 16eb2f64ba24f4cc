#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "msil/ops.hpp"
#include "msil/tensor.hpp"
#include "oracles.hpp"

using namespace msil;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Checks d(sum(w * f(inputs)))/d(input) against central differences for every
// entry of every input; w is a fixed random weighting so that each output
// entry contributes a distinct amount.
void expect_gradients_match(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            std::vector<Tensor> inputs, std::mt19937_64& rng, double h = 1e-5) {
    for (auto& in : inputs) in.set_requires_grad(true);
    const Tensor out = f(inputs);
    std::vector<double> w(out.numel());
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : w) v = u(rng);
    weighted_sum(out, w).backward();

    auto loss = [&] {
        NoGradGuard guard;
        const Tensor o = f(inputs);
        double acc = 0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * o.data()[i];
        return acc;
    };
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double numeric = oracle::central_difference(loss, data[i], h);
            const double analytic = inputs[k].grad()[i];
            EXPECT_LE(oracle::rel_error(analytic, numeric, 1e-6), 1e-4)
                << "input " << k << " entry " << i << " analytic " << analytic << " numeric " << numeric;
        }
    }
}

}  // namespace

TEST(Tensor, FactoriesAndShapeInvariants) {
    const Tensor z = Tensor::zeros({2, 3, 4, 5});
    EXPECT_EQ(z.numel(), 120u);
    EXPECT_EQ(z.data().size(), 120u);
    EXPECT_FALSE(z.requires_grad());
    EXPECT_THROW(Tensor::zeros({0, 1, 1, 1}), ShapeError);
    EXPECT_THROW(Tensor::from_data({1, 1, 2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_DOUBLE_EQ(Tensor::full({1, 2, 1, 1}, 3.5).at(0, 1, 0, 0), 3.5);
    EXPECT_DOUBLE_EQ(Tensor::scalar(-2).item(), -2);
    EXPECT_THROW((void)z.item(), ShapeError);
}

TEST(Tensor, AddElementwise) {
    const Tensor a = Tensor::from_data({1, 1, 1, 2}, {1, 2});
    const Tensor b = Tensor::from_data({1, 1, 1, 2}, {3, 4});
    EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
}

TEST(Tensor, MulByOnesIsIdentity) {
    std::mt19937_64 rng(1);
    const Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
    EXPECT_EQ(values(mul(x, Tensor::full(x.shape(), 1.0))), values(x));
}

TEST(Tensor, ChannelBroadcastMulMatchesScalarLoop) {
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({1, 2, 3, 3}, rng);
    const Tensor s = Tensor::from_data({1, 2, 1, 1}, {0.5, 2.0});
    const Tensor got = mul(x, s);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 3; ++y)
            for (int xx = 0; xx < 3; ++xx)
                EXPECT_EQ(got.at(0, c, y, xx), x.at(0, c, y, xx) * (c == 0 ? 0.5 : 2.0));
    EXPECT_EQ(values(got), values(oracle::times(x, s)));
}

TEST(Tensor, ShapeMismatchRejectedWithReport) {
    const Tensor a = Tensor::zeros({1, 2, 3, 3});
    const Tensor b = Tensor::zeros({1, 2, 3, 4});
    try {
        (void)add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(1,2,3,3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(1,2,3,4)"), std::string::npos) << msg;
    }
    EXPECT_THROW((void)mul(a, Tensor::zeros({1, 3, 1, 1})), ShapeError);
    EXPECT_THROW((void)mul(a, Tensor::zeros({2, 2, 1, 1})), ShapeError);
}

TEST(Tensor, BroadcastGradientIsSumReduced) {
    std::mt19937_64 rng(3);
    expect_gradients_match([](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                           {oracle::random_tensor({2, 3, 4, 4}, rng), oracle::random_tensor({2, 3, 1, 1}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                           {oracle::random_tensor({2, 3, 4, 4}, rng), oracle::random_tensor({2, 3, 1, 1}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return sub(in[0], in[1]); },
                           {oracle::random_tensor({1, 2, 3, 3}, rng), oracle::random_tensor({1, 2, 3, 3}, rng)}, rng);
}

TEST(Tensor, ConcatBlockLayout) {
    std::mt19937_64 rng(4);
    const Tensor a = oracle::random_tensor({1, 2, 4, 4}, rng);
    const Tensor b = oracle::random_tensor({1, 3, 4, 4}, rng);
    const Tensor c = concat_channels(a, b);
    EXPECT_EQ(c.shape(), (Shape{1, 5, 4, 4}));
    EXPECT_EQ(values(c), values(oracle::concat(a, b)));
    EXPECT_THROW((void)concat_channels(a, Tensor::zeros({1, 2, 4, 5})), ShapeError);
    EXPECT_THROW((void)concat_channels(a, Tensor::zeros({2, 2, 4, 4})), ShapeError);
}

TEST(Tensor, ConcatThenSliceRecoversBothCopies) {
    std::mt19937_64 rng(5);
    const Tensor x = oracle::random_tensor({2, 3, 2, 5}, rng);
    const Tensor c = concat_channels(x, x);
    EXPECT_EQ(values(slice_channels(c, 0, 3)), values(x));
    EXPECT_EQ(values(slice_channels(c, 3, 3)), values(x));
    EXPECT_THROW((void)slice_channels(c, 4, 3), ShapeError);
}

TEST(Tensor, ConcatGradientOfSumIsOnes) {
    Tensor a = Tensor::full({1, 2, 3, 3}, 0.3, true);
    Tensor b = Tensor::full({1, 1, 3, 3}, -0.7, true);
    sum(concat_channels(a, b)).backward();
    for (double g : a.grad()) EXPECT_EQ(g, 1.0);
    for (double g : b.grad()) EXPECT_EQ(g, 1.0);
    std::mt19937_64 rng(6);
    expect_gradients_match([](const std::vector<Tensor>& in) { return concat_channels(in[0], in[1]); },
                           {oracle::random_tensor({2, 2, 3, 3}, rng), oracle::random_tensor({2, 1, 3, 3}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return slice_channels(in[0], 1, 2); },
                           {oracle::random_tensor({2, 4, 3, 3}, rng)}, rng);
}

TEST(Tensor, SigmoidAndRelu) {
    EXPECT_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5);
    EXPECT_EQ(relu(Tensor::scalar(-3)).item(), 0.0);
    EXPECT_EQ(relu(Tensor::scalar(3)).item(), 3.0);

    Tensor x = Tensor::scalar(0.0, true);
    sigmoid(x).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
    double v = 0.0;
    const double numeric = oracle::central_difference([&] { return 1.0 / (1.0 + std::exp(-v)); }, v, 1e-5);
    EXPECT_NEAR(x.grad()[0], numeric, 1e-10);
}

TEST(Tensor, SigmoidStaysInsideOpenInterval) {
    const Tensor x = Tensor::from_data({1, 1, 1, 6}, {-1e6, -800, -40, 40, 800, 1e6});
    const Tensor y = sigmoid(x);
    for (double p : y.data()) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
        EXPECT_TRUE(std::isfinite(p));
    }
}

TEST(Tensor, ElementwiseGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    expect_gradients_match([](const std::vector<Tensor>& in) { return sigmoid(in[0]); },
                           {oracle::random_tensor({2, 3, 3, 3}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return exp(in[0]); },
                           {oracle::random_tensor({1, 2, 3, 3}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return scale(in[0], -1.7); },
                           {oracle::random_tensor({1, 2, 3, 3}, rng)}, rng);
    // ReLU: random entries in [-2,2] stay far from 0 relative to h.
    Tensor r = oracle::random_tensor({2, 2, 3, 3}, rng);
    for (double& v : r.mutable_data()) v = v >= 0 ? v + 0.01 : v - 0.01;
    expect_gradients_match([](const std::vector<Tensor>& in) { return relu(in[0]); }, {r}, rng);
}

TEST(Tensor, GlobalPools) {
    const Tensor c = Tensor::full({2, 3, 4, 5}, 1.25);
    const Tensor avg = global_avg_pool(c);
    for (double v : avg.data()) EXPECT_DOUBLE_EQ(v, 1.25);
    const Tensor m = Tensor::from_data({1, 1, 2, 2}, {1, 5, 2, 3});
    EXPECT_EQ(global_max_pool(m).item(), 5.0);
    EXPECT_EQ(global_avg_pool(m).shape(), (Shape{1, 1, 1, 1}));
}

TEST(Tensor, AvgPoolGradientIsQuarterPerCell) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, -2, 3, 0.5}, true);
    global_avg_pool(x).backward();
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
    std::mt19937_64 rng(8);
    expect_gradients_match([](const std::vector<Tensor>& in) { return global_avg_pool(in[0]); },
                           {oracle::random_tensor({2, 3, 2, 2}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return avg_pool2x2(in[0]); },
                           {oracle::random_tensor({2, 2, 4, 6}, rng)}, rng);
    expect_gradients_match([](const std::vector<Tensor>& in) { return global_max_pool(in[0]); },
                           {oracle::random_tensor({2, 3, 3, 3}, rng)}, rng);
}

TEST(Tensor, MaxPoolTieRoutesToFirstRowMajorPosition) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 4, 4, 4}, true);
    global_max_pool(x).backward();
    EXPECT_EQ(values(Tensor::from_data({1, 1, 2, 2}, {x.grad().begin(), x.grad().end()})),
              (std::vector<double>{0, 1, 0, 0}));
}

TEST(Tensor, AvgPool2x2RejectsOddSizes) { EXPECT_THROW((void)avg_pool2x2(Tensor::zeros({1, 1, 3, 4})), ShapeError); }

TEST(Tensor, BackwardOfSumIsOnesAndOfSquareIsTwoX) {
    std::mt19937_64 rng(9);
    Tensor x = oracle::random_tensor({1, 2, 3, 3}, rng, -2, 2, true);
    sum(x).backward();
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    x.zero_grad();
    sum(mul(x, x)).backward();
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Tensor, RepeatedBackwardAccumulates) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 2.0, true);
    sum(mul(x, x)).backward();
    sum(mul(x, x)).backward();
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 8.0);
    x.zero_grad();
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, BackwardRejectsNonScalarAndUntrackedLosses) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1.0, true);
    EXPECT_THROW(mul(x, x).backward(), ShapeError);
    EXPECT_THROW(Tensor::scalar(1.0).backward(), std::logic_error);
}

TEST(Tensor, SharedSubexpressionFollowsSumRule) {
    std::mt19937_64 rng(10);
    Tensor x = oracle::random_tensor({1, 2, 3, 3}, rng, -2, 2, true);
    // shared: s = sigmoid(x) used twice
    const Tensor s = sigmoid(x);
    sum(mul(s, add(s, x))).backward();
    const std::vector<double> shared(x.grad().begin(), x.grad().end());

    Tensor y = x.detach().set_requires_grad(true);
    sum(mul(sigmoid(y), add(sigmoid(y), y))).backward();
    for (std::size_t i = 0; i < shared.size(); ++i) EXPECT_NEAR(shared[i], y.grad()[i], 1e-14);
}

TEST(Tensor, OutputsStayFiniteForFiniteInputs) {
    std::mt19937_64 rng(11);
    Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng, -50, 50, true);
    const Tensor y = sigmoid(add(relu(x), mul(x, global_max_pool(x))));
    sum(y).backward();
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
    for (double g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Tensor, NoGradGuardRecordsNothing) {
    Tensor x = Tensor::full({1, 1, 1, 1}, 1.0, true);
    Tensor y;
    {
        NoGradGuard guard;
        EXPECT_TRUE(NoGradGuard::enabled());
        y = mul(x, x);
    }
    EXPECT_FALSE(NoGradGuard::enabled());
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, BranchRecorderSeesReluMaskChanges) {
    auto fingerprint = [](double v) {
        BranchRecorder rec;
        (void)relu(Tensor::from_data({1, 1, 1, 2}, {v, 1.0}));
        return rec.fingerprint();
    };
    EXPECT_EQ(fingerprint(0.5), fingerprint(0.7));
    EXPECT_NE(fingerprint(0.5), fingerprint(-0.5));
}

TEST(Tensor, OnlyLeavesAreWritable) {
    Tensor x = Tensor::full({1, 1, 1, 1}, 1.0, true);
    Tensor y = mul(x, x);
    EXPECT_THROW((void)y.mutable_data(), std::logic_error);
    EXPECT_NO_THROW((void)x.mutable_data());
}
