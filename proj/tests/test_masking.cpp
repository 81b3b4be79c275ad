#include <gtest/gtest.h>

#include <cmath>

#include "support/primitive_cases.hpp"
#include "trimlab/masking.hpp"

using namespace trimlab;

namespace {

MaskSite<double> site(std::string id, std::vector<double> logits) {
    const auto n = logits.size();
    return {id, SiteKind::ffn_hidden, Parameter<double>{"mask." + id, Tensor<double>(Shape{n}, std::move(logits)), {}, true}};
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST(Gate, ThresholdRule) {
    Tape<double> tape;
    auto m = tape.constant(Tensor<double>::from({3}, {3, -3, 0}));
    auto x = tape.constant(Tensor<double>::from({3}, {1, 2, 3}));
    EXPECT_EQ(gate(m, x, 0).value(), Tensor<double>::from({3}, {1, 0, 3}));
}

TEST(Gate, GradientAtZeroLogit) {
    Tape<double> tape;
    auto m = tape.leaf(Tensor<double>::from({1}, {0.0}));
    auto x = tape.constant(Tensor<double>::from({1}, {2.0}));
    tape.backward(sum(gate(m, x, 0)));
    EXPECT_EQ(tape.grad(m)[0], 0.5);
}

TEST(Gate, SaturatedLogitsPassInputThrough) {
    Rng rng(1);
    Tape<float> tape;
    auto x = tape.constant(oracle::random_tensor(rng, {4, 6}).cast<float>());
    auto m = tape.constant(Tensor<float>(Shape{6}, 10.0f));
    EXPECT_EQ(gate(m, x, 1).value(), x.value());
}

TEST(Gate, AxisMismatch) {
    Tape<float> tape;
    auto x = tape.constant(Tensor<float>(Shape{4, 6}));
    auto m = tape.constant(Tensor<float>(Shape{5}));
    EXPECT_THROW(gate(m, x, 1), ShapeError);
}

TEST(Sparsity, WorkedExample) {
    std::vector<MaskSite<double>> sites{site("a", {2.0, -1.0})};
    Tape<double> tape;
    const double got = sparsity_loss(tape, sites, 0.5).value().item();
    const double expect = std::hypot(sig(1.5), sig(-1.5)) / 2.0;
    EXPECT_NEAR(got, expect, 1e-15);
    EXPECT_NEAR(got, 0.418840, 1e-6);
}

TEST(Sparsity, VanishesForVeryNegativeLogits) {
    std::vector<MaskSite<double>> sites{site("a", {-800, -900}), site("b", {-1000})};
    Tape<double> tape;
    EXPECT_EQ(sparsity_loss(tape, sites, 0.5).value().item(), 0.0);
}

TEST(Sparsity, MonotoneInThreshold) {
    Rng rng(2);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<MaskSite<double>> sites{site("a", {rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-4, 4)})};
        const double t1 = rng.uniform(0.0, 1.0), t2 = t1 + rng.uniform(0.01, 1.0);
        Tape<double> tape;
        EXPECT_GT(sparsity_loss(tape, sites, t1).value().item(), sparsity_loss(tape, sites, t2).value().item());
    }
}

TEST(Sparsity, PerUnitVariantSumsEntries) {
    std::vector<MaskSite<double>> sites{site("a", {2.0, -1.0}), site("b", {0.5})};
    Tape<double> tape;
    const double got = sparsity_loss(tape, sites, 0.5, SparsityNorm::per_unit).value().item();
    EXPECT_NEAR(got, (sig(1.5) + sig(-1.5) + sig(0.0)) / 3.0, 1e-15);
}

TEST(Sparsity, EmptySiteListRejected) {
    std::vector<MaskSite<double>> none;
    Tape<double> tape;
    EXPECT_THROW(sparsity_loss(tape, none, 0.5), ConfigError);
}

TEST(Sparsity, FiniteDifference) {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) EXPECT_LE(oracle::sparsity_gradcheck(rng), 1e-6);
}

TEST(Objective, ZeroLambdaIsTaskLoss) {
    Tape<float> tape;
    auto lc = tape.leaf(Tensor<float>::scalar(0.7f));
    auto ls = tape.leaf(Tensor<float>::scalar(0.35f));
    auto total = total_objective(lc, ls, 0.0);
    EXPECT_EQ(total.id, lc.id);
}

TEST(Objective, Arithmetic) {
    Tape<double> tape;
    auto total = total_objective(tape.constant(Tensor<double>::scalar(0.7)), tape.constant(Tensor<double>::scalar(0.35)), 2.0);
    EXPECT_DOUBLE_EQ(total.value().item(), 1.4);
}

TEST(Objective, NonFiniteRejected) {
    Tape<double> tape;
    auto lc = tape.constant(Tensor<double>::scalar(0.7));
    auto ls = tape.constant(Tensor<double>::scalar(0.35));
    EXPECT_THROW(total_objective(lc, ls, std::nan("")), NumericError);
}

TEST(Objective, AutoLambdaFreezesAtFirstStep) {
    LambdaSchedule sched(std::nullopt);
    EXPECT_FALSE(sched.value());
    EXPECT_EQ(sched.resolve(2.0, 0.5), 4.0);
    EXPECT_EQ(sched.resolve(9.0, 0.1), 4.0);
    EXPECT_EQ(*sched.value(), 4.0);
    LambdaSchedule fixed(1.5);
    EXPECT_EQ(fixed.resolve(2.0, 0.5), 1.5);
}

TEST(Config, Validation) {
    SparsityConfig c;
    c.lambda = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.lambda = std::nullopt;
    c.t = std::nan("");
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Statistics, AllActive) {
    const auto spec = default_spec(Backbone::conformer_t);
    auto sites = make_mask_sites<float>(spec);
    const auto st = mask_statistics(spec, sites);
    EXPECT_EQ(st.active_fraction, 1.0);
    EXPECT_EQ(st.trimming_ratio, 0.0);
    EXPECT_EQ(st.active_units, spec.total_units());
}

TEST(Statistics, SiteActiveCount) {
    ModelSpec spec = default_spec(Backbone::conv_t);
    spec.conv_channels = {4, 8};
    auto sites = make_mask_sites<double>(spec);
    sites[0].logits.value = Tensor<double>::from({4}, {1, -1, -1, -1});
    const auto st = mask_statistics(spec, sites);
    EXPECT_EQ(st.sites[0].active, 1u);
    EXPECT_EQ(st.sites[1].active, 8u);
    EXPECT_NEAR(st.active_fraction, 9.0 / 12.0, 1e-15);
    EXPECT_GT(st.trimming_ratio, 0.0);
}

TEST(Statistics, MaterializeUsesSignOfLogit) {
    std::vector<MaskSite<double>> sites{site("a", {0.0, -1e-9, 2.0})};
    auto a = materialize(sites);
    EXPECT_EQ(a["a"], (std::vector<std::uint8_t>{1, 0, 1}));
}
