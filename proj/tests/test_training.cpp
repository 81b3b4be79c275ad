#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "trimlab/training.hpp"

using namespace trimlab;

namespace {

struct Splits {
    Dataset train, val, test;
};

const Splits& tone_splits() {
    static const Splits s = [] {
        TaskSpec t;
        t.task = TaskKind::tone_class;
        t.train_size = 60;
        t.val_size = 20;
        t.test_size = 20;
        t.seed = 3;
        return Splits{make_dataset(t, Split::train), make_dataset(t, Split::val), make_dataset(t, Split::test)};
    }();
    return s;
}

const Splits& pretext_splits() {
    static const Splits s = [] {
        TaskSpec t;
        t.task = TaskKind::pretext;
        t.train_size = 40;
        t.val_size = 8;
        t.test_size = 1;
        return Splits{make_dataset(t, Split::train), make_dataset(t, Split::val), {}};
    }();
    return s;
}

ModelSpec small_spec(Backbone b = Backbone::transformer_t) {
    if (b == Backbone::conv_t) {
        auto s = default_spec(Backbone::conv_t, HeadSpec{16, 10});
        s.conv_channels = {8, 8};
        return s;
    }
    return attention_spec(b, 16, 1, 2, 24, 8, HeadSpec{16, 10});
}

Model<float> frozen(const ModelSpec& spec, std::uint64_t seed = 1) {
    auto m = build_backbone<float>(spec, seed);
    m.freeze_encoder();
    return m;
}

TrainConfig quick(Mode mode, std::size_t steps = 40) {
    TrainConfig c;
    c.mode = mode;
    c.steps = steps;
    c.batch_size = 8;
    c.eval_every = 10;
    c.eval_batch = 20;
    c.seed = 5;
    return c;
}

DownstreamData tone_data() {
    const auto& s = tone_splits();
    return {&s.train, &s.val, &s.test};
}

std::vector<Tensor<float>> encoder_values(const Model<float>& m) {
    std::vector<Tensor<float>> out;
    m.for_each_encoder_parameter([&](const Parameter<float>& p) { out.push_back(p.value); });
    return out;
}

std::vector<Tensor<float>> head_values(const Model<float>& m) {
    std::vector<Tensor<float>> out;
    m.for_each_head_parameter([&](const Parameter<float>& p) { out.push_back(p.value); });
    return out;
}

}  // namespace

// ----- Adam ------------------------------------------------------------------

TEST(Adam, HandEvaluatedFirstStep) {
    Parameter<double> p{"w", Tensor<double>(Shape{1}, 1.0), Tensor<double>(Shape{1}, 1.0), true};
    AdamState<double> st;
    ASSERT_TRUE(adam_step<double>({&p}, st, 0.1));
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    EXPECT_NEAR(p.value[0], 0.9, 1e-8);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientOnFreshStateIsANoOp) {
    Parameter<double> p{"w", Tensor<double>(Shape{3}, 2.0), Tensor<double>(Shape{3}), true};
    AdamState<double> st;
    ASSERT_TRUE(adam_step<double>({&p}, st, 0.1));
    for (double v : p.value.values()) EXPECT_EQ(v, 2.0);
}

TEST(Adam, ZeroGradientDecaysMoments) {
    Parameter<double> p{"w", Tensor<double>(Shape{1}, 0.0), Tensor<double>(Shape{1}, 2.0), true};
    AdamState<double> st;
    adam_step<double>({&p}, st, 0.01);
    const double m = st.m[0][0], v = st.v[0][0];
    p.grad[0] = 0.0;
    adam_step<double>({&p}, st, 0.01);
    EXPECT_DOUBLE_EQ(st.m[0][0], 0.9 * m);
    EXPECT_DOUBLE_EQ(st.v[0][0], 0.999 * v);
}

TEST(Adam, MatchesScalarReference) {
    Rng rng(8);
    Parameter<double> p{"w", Tensor<double>(Shape{4}), Tensor<double>(Shape{4}), true};
    for (auto& v : p.value.values()) v = rng.uniform(-1, 1);
    std::vector<double> w(p.value.values().begin(), p.value.values().end()), m(4, 0), v(4, 0);
    AdamState<double> st;
    for (int t = 1; t <= 6; ++t) {
        for (std::size_t i = 0; i < 4; ++i) p.grad[i] = rng.uniform(-3, 3);
        for (std::size_t i = 0; i < 4; ++i) {
            const double g = p.grad[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            w[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
        }
        adam_step<double>({&p}, st, 0.05);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.value[i], w[i], 1e-12);
    }
}

TEST(Adam, NonFiniteGradientSkipsTheStep) {
    Parameter<float> a{"a", Tensor<float>(Shape{2}, 1.f), Tensor<float>(Shape{2}, 1.f), true};
    Parameter<float> b{"b", Tensor<float>(Shape{2}, 1.f), Tensor<float>(Shape{2}, 1.f), true};
    b.grad[1] = std::numeric_limits<float>::quiet_NaN();
    AdamState<float> st;
    EXPECT_FALSE(adam_step<float>({&a, &b}, st, 0.1));
    EXPECT_EQ(st.step, 0u);
    EXPECT_EQ(st.skipped, 1u);
    EXPECT_EQ(a.value[0], 1.f);
}

TEST(Adam, ShapeMismatchThrows) {
    Parameter<float> a{"a", Tensor<float>(Shape{2}), Tensor<float>(Shape{3}), true};
    AdamState<float> st;
    EXPECT_THROW(adam_step<float>({&a}, st, 0.1), ShapeError);
}

TEST(Schedule, WarmupIsExactlyLinear) {
    TrainConfig c;
    c.mode = Mode::scratch;
    c.steps = 400;
    c.lr = 1e-3;
    ASSERT_EQ(c.resolved_warmup(), 100u);
    for (std::size_t s = 0; s < 100; ++s) EXPECT_EQ(lr_at(c, s), 1e-3 * static_cast<double>(s) / 100.0);
    EXPECT_EQ(lr_at(c, 100), 1e-3);
    EXPECT_EQ(lr_at(c, 399), 1e-3);
    c.mode = Mode::probe;
    EXPECT_EQ(lr_at(c, 0), 1e-3);
}

TEST(Schedule, InvalidConfigsAreRejected) {
    TrainConfig c;
    c.warmup_steps = c.steps + 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.steps = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

// ----- losses and metrics ----------------------------------------------------

TEST(TaskLoss, Examples) {
    Tape<double> tape;
    auto logits = tape.constant(Tensor<double>(Shape{1, 2}));
    const int label = 0;
    EXPECT_NEAR(task_loss(logits, LossKind::cross_entropy, std::span<const int>(&label, 1), nullptr).value().item(),
                std::log(2.0), 1e-12);
    auto one = tape.constant(Tensor<double>(Shape{1, 1}));
    Tensor<double> target(Shape{1, 1}, 1.0);
    EXPECT_NEAR(task_loss(one, LossKind::binary_cross_entropy, {}, &target).value().item(), std::log(2.0), 1e-12);
    const int bad = 2;
    EXPECT_THROW(task_loss(logits, LossKind::cross_entropy, std::span<const int>(&bad, 1), nullptr), std::out_of_range);
    EXPECT_THROW(task_loss(one, LossKind::binary_cross_entropy, {}, nullptr), ConfigError);
}

TEST(TaskLoss, CrossEntropyGradientMatchesFiniteDifferences) {
    Rng rng(4);
    const std::vector<int> labels{2, 0, 1};
    auto f = [&](Tape<double>&, const std::vector<Var<double>>& in) {
        return task_loss(in[0], LossKind::cross_entropy, labels, nullptr);
    };
    const auto r = oracle::gradcheck(f, {oracle::random_tensor(rng, Shape{3, 4}, -2, 2)}, rng);
    EXPECT_LE(r.rel_error, 1e-6);
}

TEST(Metrics, PerfectPredictor) {
    const std::vector<int> y{0, 1, 2, 1};
    EXPECT_DOUBLE_EQ(weighted_accuracy(y, y, 3).value, 1.0);
    Tensor<double> t(Shape{3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
    Tensor<double> s(Shape{3, 2}, std::vector<double>{0.9, 0.1, 0.2, 0.8, 0.7, 0.6});
    EXPECT_DOUBLE_EQ(mean_average_precision(s, t).value, 1.0);
}

TEST(Metrics, HandRankedAveragePrecision) {
    const std::vector<double> s{0.9, 0.8, 0.1};
    const std::vector<std::uint8_t> y{1, 0, 1};
    EXPECT_NEAR(*average_precision(s, y), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(Metrics, TiesFollowIndexOrder) {
    const std::vector<double> s{0.5, 0.5};
    EXPECT_DOUBLE_EQ(*average_precision(s, std::vector<std::uint8_t>{0, 1}), 0.5);
    EXPECT_DOUBLE_EQ(*average_precision(s, std::vector<std::uint8_t>{1, 0}), 1.0);
}

TEST(Metrics, ConstantPredictorOnBalancedClasses) {
    const std::vector<int> y{0, 1, 0, 1}, p{0, 0, 0, 0};
    EXPECT_DOUBLE_EQ(weighted_accuracy(p, y, 2).value, 0.5);
}

TEST(Metrics, WeightsFollowClassFrequency) {
    // class 0: 3 of 4 right, class 1: 0 of 1 -> (4/5)(3/4) + (1/5)(0) = 0.6
    const std::vector<int> y{0, 0, 0, 0, 1}, p{0, 0, 0, 1, 0};
    EXPECT_DOUBLE_EQ(weighted_accuracy(p, y, 2).value, 0.6);
}

TEST(Metrics, AbsentClassesAreReported) {
    const std::vector<int> y{0, 0}, p{0, 1};
    const auto r = weighted_accuracy(p, y, 3);
    EXPECT_DOUBLE_EQ(r.value, 0.5);
    EXPECT_EQ(r.diagnostics.size(), 2u);
    Tensor<double> t(Shape{2, 2}, std::vector<double>{1, 0, 0, 0});
    Tensor<double> s(Shape{2, 2}, std::vector<double>{0.3, 0.1, 0.2, 0.4});
    const auto m = mean_average_precision(s, t);
    EXPECT_DOUBLE_EQ(m.value, 1.0);
    EXPECT_EQ(m.diagnostics.size(), 1u);
}

TEST(Metrics, EmptySetThrows) {
    EXPECT_THROW(weighted_accuracy({}, {}, 2), std::invalid_argument);
    EXPECT_THROW(mean_average_precision(Tensor<double>(Shape{0, 2}), Tensor<double>(Shape{0, 2})), std::invalid_argument);
}

// ----- pretraining -------------------------------------------------------------

TEST(Pretrain, ReconstructionLossFalls) {
    const auto& d = pretext_splits();
    for (auto b : {Backbone::conv_t, Backbone::conformer_t}) {
        auto cfg = quick(Mode::pretrain, 120);
        cfg.eval_every = 1;
        auto res = run_pretrain(build_backbone<float>(small_spec(b), 2), d.train, d.val, cfg);
        ASSERT_EQ(res.history.size(), 120u);
        EXPECT_GT(res.history.front().loss, res.history.back().loss) << to_string(b);
        EXPECT_GT(res.history.front().metric, res.history.back().metric) << to_string(b);
        EXPECT_TRUE(res.model.encoder_frozen);
    }
}

TEST(Pretrain, NothingHiddenMeansNothingLearned) {
    const auto& d = pretext_splits();
    auto cfg = quick(Mode::pretrain, 10);
    cfg.mask_fraction = 0.0;
    const auto start = build_backbone<float>(small_spec(), 2);
    auto res = run_pretrain(start, d.train, d.val, cfg);
    EXPECT_EQ(encoder_values(res.model), encoder_values(start));
    for (const auto& h : res.history) EXPECT_EQ(h.loss, 0.0);
}

TEST(Pretrain, FrozenResultSurvivesProbing) {
    const auto& d = pretext_splits();
    auto pre = run_pretrain(build_backbone<float>(small_spec(), 2), d.train, d.val, quick(Mode::pretrain, 10));
    auto probe = run_downstream(pre.model, tone_data(), quick(Mode::probe, 20));
    EXPECT_EQ(encoder_values(probe.model), encoder_values(pre.model));
}

TEST(Pretrain, NonFiniteLossAborts) {
    const auto& d = pretext_splits();
    auto m = build_backbone<float>(small_spec(Backbone::conv_t), 2);
    m.find("encoder.block0.conv.weight")->value[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(run_pretrain(m, d.train, d.val, quick(Mode::pretrain, 5)), NumericError);
}

TEST(Pretrain, MaskedFramesAreDistinctAndCounted) {
    Rng rng(1);
    const auto f = pick_masked_frames(rng, 30, 0.3);
    ASSERT_EQ(f.size(), 9u);
    for (std::size_t i = 1; i < f.size(); ++i) EXPECT_LT(f[i - 1], f[i]);
    EXPECT_LT(f.back(), 30u);
}

// ----- downstream --------------------------------------------------------------

TEST(Downstream, EncoderBytesUntouched) {
    for (auto b : {Backbone::conv_t, Backbone::transformer_t, Backbone::conformer_t})
        for (auto mode : {Mode::probe, Mode::mask, Mode::ssf}) {
            const auto m = frozen(small_spec(b));
            auto res = run_downstream(m, tone_data(), quick(mode, 20));
            EXPECT_EQ(encoder_values(res.model), encoder_values(m)) << to_string(b) << " " << to_string(mode);
        }
}

TEST(Downstream, UnfrozenEncoderIsRejected) {
    auto m = build_backbone<float>(small_spec(), 1);
    for (auto mode : {Mode::probe, Mode::mask, Mode::ssf})
        EXPECT_THROW(run_downstream(m, tone_data(), quick(mode, 5)), ConfigError);
    EXPECT_THROW(run_downstream(frozen(small_spec()), tone_data(), quick(Mode::pretrain, 5)), ConfigError);
}

TEST(Downstream, ZeroLambdaReproducesProbeBitwise) {
    for (auto b : {Backbone::conv_t, Backbone::conformer_t}) {
        const auto m = frozen(small_spec(b));
        auto probe = run_downstream(m, tone_data(), quick(Mode::probe, 60));
        auto cfg = quick(Mode::mask, 60);
        cfg.sparsity.lambda = 0.0;
        auto mask = run_downstream(m, tone_data(), cfg);
        const auto st = mask_statistics(m.spec, mask.masks);
        EXPECT_EQ(st.active_fraction, 1.0);
        EXPECT_EQ(head_values(mask.model), head_values(probe.model)) << to_string(b);
        ASSERT_EQ(mask.history.size(), probe.history.size());
        for (std::size_t i = 0; i < probe.history.size(); ++i) {
            EXPECT_EQ(mask.history[i].task_loss, probe.history[i].task_loss);
            EXPECT_EQ(mask.history[i].loss, probe.history[i].loss);
            EXPECT_EQ(mask.history[i].metric, probe.history[i].metric);
        }
    }
}

TEST(Downstream, HugeLambdaKillsAlmostEverything) {
    auto cfg = quick(Mode::mask, 400);
    cfg.lr = 0.05;
    cfg.sparsity.lambda = 1e6;
    cfg.eval_every = 100;
    for (const auto& spec : {default_spec(Backbone::conv_t, HeadSpec{16, 10}), small_spec(Backbone::conformer_t)}) {
        auto res = run_downstream(frozen(spec), tone_data(), cfg);
        // the ceiling is the ratio with every unit gone: unmaskable projections and norms remain
        auto none = all_active(spec);
        for (auto& [id, g] : none) std::fill(g.begin(), g.end(), 0);
        const double ceiling = mask_statistics(spec, none).trimming_ratio;
        EXPECT_GE(res.history.back().trim_ratio, 0.9 * ceiling) << to_string(spec.backbone);
        EXPECT_LE(res.history.back().active_fraction, 0.05);
        for (std::size_t i = 1; i < res.history.size(); ++i)
            EXPECT_GE(res.history[i].trim_ratio, res.history[i - 1].trim_ratio - 1e-12);
    }
}

TEST(Downstream, MaskLogitsReceiveGradientOnFirstBatch) {
    const auto m = frozen(small_spec(Backbone::conformer_t));
    auto sites = make_mask_sites<float>(m.spec);
    LogitGateHook<float> hook(sites);
    const auto& d = tone_splits().train;
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
    auto model = m;
    reinit_head(model, 5);
    Tape<float> tape;
    auto logits = forward_head(model, tape, forward_encoder(model, tape, tape.constant(d.batch_features(idx)), &hook));
    auto loss = task_loss(logits, LossKind::cross_entropy, d.batch_labels(idx), nullptr);
    for (auto& s : sites) s.logits.zero_grad();
    tape.backward(loss);
    double total = 0;
    for (const auto& s : sites)
        for (float g : s.logits.grad.values()) total += std::abs(g);
    EXPECT_GT(total, 0.0);
}

TEST(Downstream, RecordedObjectiveDecomposes) {
    auto cfg = quick(Mode::mask, 50);
    cfg.eval_every = 5;
    auto res = run_downstream(frozen(small_spec(Backbone::transformer_t)), tone_data(), cfg);
    ASSERT_FALSE(res.history.empty());
    for (const auto& h : res.history) {
        ASSERT_TRUE(h.sparsity_loss && h.lambda);
        // kept apart so the compiler cannot fuse the multiply into the add
        volatile float weighted = static_cast<float>(*h.lambda) * static_cast<float>(*h.sparsity_loss);
        const float expect = static_cast<float>(h.task_loss) + weighted;
        EXPECT_EQ(static_cast<float>(h.loss), expect);
    }
    // auto lambda is L_C / L_S of the first step and stays fixed
    for (const auto& h : res.history) EXPECT_EQ(*h.lambda, *res.history.front().lambda);
}

TEST(Downstream, IdentityModulationMatchesProbe) {
    const auto m = frozen(small_spec(Backbone::conformer_t));
    auto probe = run_downstream(m, tone_data(), quick(Mode::probe, 30));
    auto cfg = quick(Mode::ssf, 30);
    cfg.freeze_modulation = true;
    auto ssf = run_downstream(m, tone_data(), cfg);
    EXPECT_EQ(head_values(ssf.model), head_values(probe.model));
    for (const auto& s : ssf.ssf) {
        for (float g : s.gamma.value.values()) EXPECT_EQ(g, 1.f);
        for (float b : s.beta.value.values()) EXPECT_EQ(b, 0.f);
    }
}

TEST(Downstream, ModulationLearnsWhenTrainable) {
    auto res = run_downstream(frozen(small_spec(Backbone::transformer_t)), tone_data(), quick(Mode::ssf, 20));
    double moved = 0;
    for (const auto& s : res.ssf)
        for (float g : s.gamma.value.values()) moved += std::abs(g - 1.f);
    EXPECT_GT(moved, 0.0);
}

TEST(Downstream, SameSeedSameHistory) {
    for (auto mode : {Mode::mask, Mode::ssf}) {
        const auto m = frozen(small_spec(Backbone::conv_t));
        auto a = run_downstream(m, tone_data(), quick(mode, 30));
        auto b = run_downstream(m, tone_data(), quick(mode, 30));
        ASSERT_EQ(a.history.size(), b.history.size());
        for (std::size_t i = 0; i < a.history.size(); ++i) {
            EXPECT_EQ(a.history[i].loss, b.history[i].loss);
            EXPECT_EQ(a.history[i].metric, b.history[i].metric);
            EXPECT_EQ(a.history[i].trim_ratio, b.history[i].trim_ratio);
        }
    }
}

TEST(Downstream, ScratchTrainsTheTrimmedSpecWithWarmup) {
    const auto m = frozen(small_spec(Backbone::transformer_t));
    auto masks = all_active(m.spec);
    masks.at("layer0.ffn_hidden")[3] = 0;
    masks.at("layer0.attn_heads")[1] = 0;
    const auto plan = plan_trim(m.spec, masks);
    auto fresh = scratch_model<float>(plan, 9);
    EXPECT_EQ(fresh.spec.layers[0].heads, 1u);
    EXPECT_EQ(fresh.spec.layers[0].ffn_hidden, 23u);
    const auto before = encoder_values(fresh);
    auto cfg = quick(Mode::scratch, 40);
    cfg.eval_every = 1;
    auto res = run_downstream(fresh, tone_data(), cfg);
    EXPECT_NE(encoder_values(res.model), before);
    ASSERT_EQ(cfg.resolved_warmup(), 10u);
    for (std::size_t s = 0; s < 40; ++s) EXPECT_EQ(res.history[s].lr, lr_at(cfg, s));
    EXPECT_EQ(res.history[4].lr, 1e-3 * 4 / 10);
}

TEST(Downstream, BestCheckpointIsHighestValidation) {
    auto cfg = quick(Mode::mask, 60);
    cfg.eval_every = 10;
    auto res = run_downstream(frozen(small_spec(Backbone::conv_t)), tone_data(), cfg);
    double best = -1;
    std::size_t step = 0;
    for (const auto& h : res.history)
        if (h.metric >= best) {
            best = h.metric;
            step = h.step;
        }
    EXPECT_EQ(res.best.val_metric, best);
    EXPECT_EQ(res.best.step, step);
    ASSERT_TRUE(res.best_masks.has_value());
}
