#include <gtest/gtest.h>

#include <cmath>

#include "support/primitive_cases.hpp"
#include "trimlab/autograd.hpp"

using namespace trimlab;
using trimlab::oracle::gradcheck;
using trimlab::oracle::random_tensor;

TEST(Forward, MatmulSmall) {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>::from({2, 2}, {1, 2, 3, 4}));
    auto b = tape.constant(Tensor<float>::from({2, 1}, {1, 1}));
    auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c.value()[0], 3.0f);
    EXPECT_EQ(c.value()[1], 7.0f);
}

TEST(Forward, Relu) {
    Tape<float> tape;
    auto y = relu(tape.constant(Tensor<float>::from({3}, {-1, 0, 2})));
    EXPECT_EQ(y.value(), Tensor<float>::from({3}, {0, 0, 2}));
}

TEST(Forward, SoftmaxUniform) {
    Tape<float> tape;
    auto y = softmax(tape.constant(Tensor<float>::from({2}, {0, 0})));
    EXPECT_EQ(y.value()[0], 0.5f);
    EXPECT_EQ(y.value()[1], 0.5f);
}

TEST(Forward, ShapeMismatchNamesPrimitive) {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>({2, 3}));
    auto b = tape.constant(Tensor<float>({2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.primitive(), "matmul");
        EXPECT_EQ(e.lhs(), (Shape{2, 3}));
        EXPECT_EQ(e.rhs(), (Shape{2, 3}));
    }
}

TEST(Forward, NonFiniteOutputThrows) {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>::from({1}, {3e38f}));
    EXPECT_THROW(add(a, a), NumericError);
}

TEST(Backward, LinearFunction) {
    Tape<double> tape;
    auto w = tape.leaf(Tensor<double>::from({2}, {1, 2}));
    auto x = tape.constant(Tensor<double>::from({2}, {3, 4}));
    tape.backward(sum(mul(w, x)));
    EXPECT_EQ(tape.grad(w), Tensor<double>::from({2}, {3, 4}));
}

TEST(Backward, SigmoidAtZero) {
    Tape<double> tape;
    auto m = tape.leaf(Tensor<double>::scalar(0.0));
    tape.backward(sigmoid(m));
    EXPECT_EQ(tape.grad(m).item(), 0.25);
}

TEST(Backward, RejectsNonScalarLoss) {
    Tape<double> tape;
    auto w = tape.leaf(Tensor<double>::from({2}, {1, 2}));
    EXPECT_THROW(tape.backward(relu(w)), std::invalid_argument);
}

TEST(Backward, RejectsForeignLoss) {
    Tape<double> tape, other;
    auto w = other.leaf(Tensor<double>::scalar(1.0));
    EXPECT_THROW(tape.backward(sum(w)), std::invalid_argument);
}

TEST(Backward, AccumulatesAcrossUses) {
    // x*x + 3x used twice vs. a single-use reformulation with coefficient 2x+3
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({3}, {0.5, -1.0, 2.0}));
    tape.backward(sum(add(mul(x, x), scale(x, 3.0))));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(tape.grad(x)[i], 2 * x.value()[i] + 3);
}

TEST(Backward, ParameterGradAccumulatesAcrossTapes) {
    Parameter<double> p{"w", Tensor<double>::from({2}, {1, 2}), {}, true};
    p.zero_grad();
    for (int rep = 0; rep < 2; ++rep) {
        Tape<double> tape;
        auto w = tape.param(p);
        tape.backward(sum(scale(w, 2.0)));
    }
    EXPECT_EQ(p.grad, Tensor<double>::from({2}, {4, 4}));
}

TEST(Backward, OpCountLinearInTape) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({4}, {1, 2, 3, 4}));
    auto y = x;
    for (int i = 0; i < 50; ++i) y = gelu(add_scalar(y, 0.01));
    tape.backward(sum(y));
    EXPECT_LE(tape.backward_ops(), tape.op_nodes());
    EXPECT_GT(tape.backward_ops(), 0u);
}

TEST(SteRound, ThresholdTiesUp) {
    Tape<double> tape;
    auto y = ste_round(tape.constant(Tensor<double>::from({3}, {0.49, 0.5, 0.51})));
    EXPECT_EQ(y.value(), Tensor<double>::from({3}, {0, 1, 1}));
}

TEST(SteRound, IdentityBackward) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({2}, {0.2, 0.9}));
    auto g = tape.constant(Tensor<double>::from({2}, {-1.5, 2.5}));
    tape.backward(sum(mul(ste_round(x), g)));
    EXPECT_EQ(tape.grad(x), Tensor<double>::from({2}, {-1.5, 2.5}));
}

TEST(SteRound, ThroughSigmoidAtZero) {
    Tape<double> tape;
    auto m = tape.leaf(Tensor<double>::scalar(0.0));
    tape.backward(ste_round(sigmoid(m)));
    EXPECT_EQ(tape.grad(m).item(), 0.25);
}

TEST(SteRound, Idempotent) {
    Rng rng(11);
    Tape<double> tape;
    auto x = tape.constant(random_tensor(rng, {64}, -2, 2));
    auto once = ste_round(x);
    EXPECT_EQ(ste_round(once).value(), once.value());
}

// Finite-difference sweep over the differentiable primitives. The acceptance
// binary runs the same catalogue at 50 instances each; here 10 suffice.
TEST(GradCheck, EveryPrimitive) {
    Rng rng(3);
    for (const auto& c : oracle::primitive_cases())
        for (int rep = 0; rep < 10; ++rep) {
            auto inst = c.make(rng);
            const auto res = gradcheck(inst.fn, inst.inputs, rng);
            EXPECT_LE(res.rel_error, 1e-6) << c.name << " instance " << rep;
            EXPECT_GT(res.numeric_norm, 0.0) << c.name << " instance " << rep;
        }
}

TEST(GradCheck, SparsityLoss) {
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) EXPECT_LE(oracle::sparsity_gradcheck(rng), 1e-6);
}

TEST(GradCheck, Composite) {
    Rng rng(7);
    auto f = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        auto h = gelu(linear(v[0], v[1], &v[2]));
        return layer_norm(softmax(h), t.constant(Tensor<double>({h.shape()[1]}, 1.3)),
                          t.constant(Tensor<double>({h.shape()[1]}, 0.1)));
    };
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<Tensor<double>> in{random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4}), random_tensor(rng, {5})};
        EXPECT_LE(gradcheck(f, in, rng).rel_error, 1e-6);
    }
}
