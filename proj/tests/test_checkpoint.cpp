#include <gtest/gtest.h>

#include <filesystem>

#include "trimlab/checkpoint.hpp"
#include "trimlab/config.hpp"

using namespace trimlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    auto p = fs::temp_directory_path() / ("trimlab_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::create_directories(p);
    return p;
}

Checkpoint sample(bool with_extras) {
    auto m = build_backbone<float>(attention_spec(Backbone::conformer_t, 16, 2, 2, 24, 8, HeadSpec{12, 10}), 4);
    m.freeze_encoder();
    auto masks = make_mask_sites<float>(m.spec);
    masks[1].logits.value[0] = -0.25f;
    AdamState<float> opt;
    auto heads = m.head_parameters();
    for (auto* p : heads) p->grad = Tensor<float>(p->value.shape(), 0.1f);
    adam_step(heads, opt, 1e-3);
    if (!with_extras) return make_checkpoint(m);
    return make_checkpoint(m, &masks, &opt, Json{{"mode", "mask"}, {"note", 1.5}});
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    for (bool extras : {false, true}) {
        const auto bytes = serialize(sample(extras));
        EXPECT_EQ(serialize(deserialize(bytes)), bytes);
    }
}

TEST(Checkpoint, FileLayout) {
    const auto dir = scratch_dir();
    const auto path = (dir / "a.ckpt").string();
    const auto c = sample(true);
    const auto written = save_checkpoint(path, c);
    EXPECT_EQ(written, fs::file_size(path));
    const auto bytes = serialize(c);
    EXPECT_EQ(bytes.substr(0, 8), "TRIMLAB1");
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    const auto header = Json::parse(bytes.substr(16, hlen));
    std::uint64_t payload = 0;
    for (const auto& t : header["tensors"]) payload += t["length"].get<std::uint64_t>();
    EXPECT_EQ(16 + hlen + payload, bytes.size());
    EXPECT_EQ(header["format_version"], 1);
    fs::remove_all(dir);
}

TEST(Checkpoint, ModelMasksAndOptimizerSurvive) {
    const auto c = deserialize(serialize(sample(true)));
    const auto m = model_from_checkpoint<float>(c);
    EXPECT_TRUE(m.encoder_frozen);
    auto ref = build_backbone<float>(attention_spec(Backbone::conformer_t, 16, 2, 2, 24, 8, HeadSpec{12, 10}), 4);
    std::vector<Tensor<float>> a, b;
    m.for_each_encoder_parameter([&](const Parameter<float>& p) { a.push_back(p.value); });
    ref.for_each_encoder_parameter([&](const Parameter<float>& p) { b.push_back(p.value); });
    EXPECT_EQ(a, b);
    const auto masks = masks_from_checkpoint<float>(c);
    EXPECT_EQ(masks[1].logits.value[0], -0.25f);
    EXPECT_EQ(c.header["optimizer"]["step"], 1);
    EXPECT_NE(c.find("adam.m.head.fc1.weight"), nullptr);
    EXPECT_EQ(c.header["meta"]["mode"], "mask");
}

TEST(Checkpoint, MissingMasksAreReported) {
    const auto c = sample(false);
    EXPECT_FALSE(c.has_masks());
    EXPECT_THROW(masks_from_checkpoint<float>(c), CheckpointError);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    const auto good = serialize(sample(false));
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize(bad_magic), CheckpointError);
    EXPECT_THROW(deserialize(good.substr(0, good.size() - 4)), CheckpointError);
    EXPECT_THROW(deserialize(good + "xx"), CheckpointError);
    auto bad_len = good;
    bad_len[15] = '\x7f';
    EXPECT_THROW(deserialize(bad_len), CheckpointError);
    EXPECT_THROW(deserialize("TRIMLAB1"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
    auto c = sample(false);
    c.tensors[0].value = Tensor<float>(Shape{1});
    EXPECT_THROW(model_from_checkpoint<float>(deserialize(serialize(c))), CheckpointError);
}

TEST(Checkpoint, TrimmedModelIsSmaller) {
    auto m = build_backbone<float>(default_spec(Backbone::conv_t), 1);
    auto masks = all_active(m.spec);
    for (auto& [id, g] : masks)
        for (std::size_t i = 0; i < g.size(); i += 2) g[i] = 0;
    const auto [t, rep] = apply_trim(m, plan_trim(m.spec, masks));
    const auto base = serialize(make_checkpoint(m)).size(), cut = serialize(make_checkpoint(t)).size();
    EXPECT_LT(cut, base);
    const auto back = model_from_checkpoint<float>(deserialize(serialize(make_checkpoint(t))));
    EXPECT_EQ(back.spec, t.spec);
}

// ----- config -------------------------------------------------------------------

TEST(Config, DefaultsResolveAndRoundTrip) {
    const auto c = run_config_from_json(Json::object());
    EXPECT_EQ(c.train.steps, 5000u);
    EXPECT_EQ(c.model.backbone, Backbone::conformer_t);
    EXPECT_EQ(c.model.head->outputs, 10u);
    const auto j = to_json(c);
    EXPECT_EQ(to_json(run_config_from_json(j)), j);
}

TEST(Config, UnknownKeysNameTheKey) {
    try {
        run_config_from_json(Json{{"train", {{"stepz", 10}}}});
        FAIL() << "accepted an unknown key";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("stepz"), std::string::npos);
    }
    EXPECT_THROW(run_config_from_json(Json{{"bogus", 1}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"model", {{"layers", {{{"heads", 2}, {"width", 3}}}}}}}), ConfigError);
}

TEST(Config, TypeAndValueErrors) {
    EXPECT_THROW(run_config_from_json(Json{{"train", {{"steps", "many"}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"train", {{"steps", -3}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"train", {{"mode", "finetune"}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"sparsity", {{"lambda", "lots"}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"task", {{"task", "speech"}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"model", {{"backbone", "conv_t"}, {"conv_channels", Json::array()}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json(Json{{"task", {{"task", "chord_tags"}}}, {"model", {{"head", {{"outputs", 10}}}}}}),
                 ConfigError);
}

TEST(Config, HeadFollowsTask) {
    const auto c = run_config_from_json(Json{{"task", {{"task", "chord_tags"}}}, {"model", {{"backbone", "conv_t"}}}});
    EXPECT_EQ(c.model.head->outputs, 8u);
    EXPECT_EQ(c.model.conv_channels, default_spec(Backbone::conv_t).conv_channels);
}

TEST(Config, SparsityForms) {
    auto c = run_config_from_json(Json{{"sparsity", {{"t", 0.3}, {"lambda", 2.5}, {"norm", "per_unit"}}}});
    EXPECT_EQ(c.train.sparsity.t, 0.3);
    EXPECT_EQ(*c.train.sparsity.lambda, 2.5);
    EXPECT_EQ(c.train.sparsity.norm, SparsityNorm::per_unit);
    c = run_config_from_json(Json{{"sparsity", {{"lambda", "auto"}}}});
    EXPECT_FALSE(c.train.sparsity.lambda.has_value());
}

TEST(Config, TrimmedSpecsSurviveJson) {
    auto s = default_spec(Backbone::conformer_t);
    s.layers[1].heads = 0;
    s.layers[2].conv_channels = 5;
    EXPECT_EQ(model_spec_from_json(to_json(s)), s);
    auto c = default_spec(Backbone::conv_t);
    c.conv_channels = {3, 0, 7, 1};
    EXPECT_EQ(model_spec_from_json(to_json(c)), c);
}
