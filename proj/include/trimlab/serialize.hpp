#pragma once

// JSON forms of the configuration and spec types. Readers are strict: every
// key must be known, and errors name the offending key with its section.

#include <nlohmann/json.hpp>

#include <set>
#include <string>

#include "trimlab/data.hpp"
#include "trimlab/masking.hpp"
#include "trimlab/nn.hpp"
#include "trimlab/training.hpp"

namespace trimlab {

using Json = nlohmann::json;

namespace detail {

inline void require_object(const Json& j, const std::string& section) {
    if (!j.is_object()) throw ConfigError(section + ": expected a JSON object");
}

inline void reject_unknown(const Json& j, const std::string& section, std::initializer_list<const char*> known) {
    const std::set<std::string> ok(known.begin(), known.end());
    for (const auto& [k, _] : j.items())
        if (!ok.count(k)) throw ConfigError(section + ": unknown key \"" + k + "\"");
}

template <class V>
void read(const Json& j, const std::string& section, const char* key, V& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(section + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
}

inline void read_size(const Json& j, const std::string& section, const char* key, std::size_t& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0))
        throw ConfigError(section + "." + key + ": expected a non-negative integer");
    out = it->get<std::size_t>();
}

}  // namespace detail

// ----- model ----------------------------------------------------------------

inline Json to_json(const ModelSpec& s) {
    Json j;
    j["backbone"] = to_string(s.backbone);
    j["input_dim"] = s.input_dim;
    if (s.backbone == Backbone::conv_t) {
        j["conv_channels"] = s.conv_channels;
        j["conv_kernel"] = s.conv_kernel;
        j["conv_stride"] = s.conv_stride;
        j["conv_padding"] = s.conv_padding;
    } else {
        j["d_model"] = s.d_model;
        j["d_head"] = s.d_head;
        j["depthwise_kernel"] = s.depthwise_kernel;
        Json layers = Json::array();
        for (const auto& l : s.layers) {
            Json e{{"heads", l.heads}, {"ffn_hidden", l.ffn_hidden}};
            if (s.backbone == Backbone::conformer_t) e["conv_channels"] = l.conv_channels;
            layers.push_back(e);
        }
        j["layers"] = layers;
    }
    j["head"] = s.head ? Json{{"hidden", s.head->hidden}, {"outputs", s.head->outputs}} : Json(nullptr);
    return j;
}

/// Missing keys take the defaults of `default_spec(backbone)`.
inline ModelSpec model_spec_from_json(const Json& j, const std::string& section = "model") {
    detail::require_object(j, section);
    detail::reject_unknown(j, section, {"backbone", "input_dim", "conv_channels", "conv_kernel", "conv_stride", "conv_padding",
                                        "d_model", "d_head", "depthwise_kernel", "layers", "head"});
    std::string name = "conformer_t";
    detail::read(j, section, "backbone", name);
    ModelSpec s = default_spec(backbone_from_string(name));
    detail::read_size(j, section, "input_dim", s.input_dim);
    if (j.contains("conv_channels")) {
        if (s.backbone != Backbone::conv_t) throw ConfigError(section + ".conv_channels: only valid for conv_t (use layers[].conv_channels)");
        detail::read(j, section, "conv_channels", s.conv_channels);
    }
    detail::read_size(j, section, "conv_kernel", s.conv_kernel);
    detail::read_size(j, section, "conv_stride", s.conv_stride);
    detail::read_size(j, section, "conv_padding", s.conv_padding);
    detail::read_size(j, section, "d_model", s.d_model);
    detail::read_size(j, section, "d_head", s.d_head);
    detail::read_size(j, section, "depthwise_kernel", s.depthwise_kernel);
    if (auto it = j.find("layers"); it != j.end()) {
        if (!it->is_array()) throw ConfigError(section + ".layers: expected an array");
        s.layers.clear();
        for (std::size_t i = 0; i < it->size(); ++i) {
            const auto& e = (*it)[i];
            const std::string sec = section + ".layers[" + std::to_string(i) + "]";
            detail::require_object(e, sec);
            detail::reject_unknown(e, sec, {"heads", "ffn_hidden", "conv_channels"});
            LayerSpec l;
            if (s.backbone != Backbone::conformer_t) l.conv_channels = 0;
            detail::read_size(e, sec, "heads", l.heads);
            detail::read_size(e, sec, "ffn_hidden", l.ffn_hidden);
            detail::read_size(e, sec, "conv_channels", l.conv_channels);
            s.layers.push_back(l);
        }
    }
    if (auto it = j.find("head"); it != j.end()) {
        if (it->is_null()) {
            s.head.reset();
        } else {
            detail::require_object(*it, section + ".head");
            detail::reject_unknown(*it, section + ".head", {"hidden", "outputs"});
            HeadSpec h;
            detail::read_size(*it, section + ".head", "hidden", h.hidden);
            detail::read_size(*it, section + ".head", "outputs", h.outputs);
            s.head = h;
        }
    }
    try {
        s.validate();
    } catch (const std::exception& e) {
        throw ConfigError(section + ": " + e.what());
    }
    return s;
}

// ----- task -----------------------------------------------------------------

inline Json to_json(const TaskSpec& t) {
    return Json{{"task", to_string(t.task)},       {"sample_rate", t.sample_rate}, {"clip_length", t.clip_length},
                {"noise_std", t.noise_std},         {"train_size", t.train_size},   {"val_size", t.val_size},
                {"test_size", t.test_size},         {"seed", t.seed}};
}

inline TaskSpec task_spec_from_json(const Json& j, const std::string& section = "task") {
    detail::require_object(j, section);
    detail::reject_unknown(j, section, {"task", "sample_rate", "clip_length", "noise_std", "train_size", "val_size", "test_size", "seed"});
    TaskSpec t;
    std::string name = to_string(t.task);
    detail::read(j, section, "task", name);
    t.task = task_from_string(name);
    detail::read(j, section, "sample_rate", t.sample_rate);
    detail::read_size(j, section, "clip_length", t.clip_length);
    detail::read(j, section, "noise_std", t.noise_std);
    detail::read_size(j, section, "train_size", t.train_size);
    detail::read_size(j, section, "val_size", t.val_size);
    detail::read_size(j, section, "test_size", t.test_size);
    detail::read(j, section, "seed", t.seed);
    t.validate();
    return t;
}

// ----- training -------------------------------------------------------------

inline Json to_json(const SparsityConfig& s) {
    return Json{{"t", s.t},
                {"lambda", s.lambda ? Json(*s.lambda) : Json("auto")},
                {"norm", s.norm == SparsityNorm::per_site ? "per_site" : "per_unit"}};
}

inline SparsityConfig sparsity_from_json(const Json& j, const std::string& section = "sparsity") {
    detail::require_object(j, section);
    detail::reject_unknown(j, section, {"t", "lambda", "norm"});
    SparsityConfig s;
    detail::read(j, section, "t", s.t);
    if (auto it = j.find("lambda"); it != j.end()) {
        if (it->is_string() && it->get<std::string>() == "auto") s.lambda.reset();
        else if (it->is_number()) s.lambda = it->get<double>();
        else throw ConfigError(section + ".lambda: expected a number or \"auto\"");
    }
    if (auto it = j.find("norm"); it != j.end()) {
        const auto n = it->is_string() ? it->get<std::string>() : std::string();
        if (n == "per_site") s.norm = SparsityNorm::per_site;
        else if (n == "per_unit") s.norm = SparsityNorm::per_unit;
        else throw ConfigError(section + ".norm: expected \"per_site\" or \"per_unit\"");
    }
    s.validate();
    return s;
}

/// The train section; the sparsity block lives in its own section.
inline Json to_json(const TrainConfig& c) {
    return Json{{"mode", to_string(c.mode)},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"warmup_steps", c.resolved_warmup()},
                {"seed", c.seed},
                {"loss_kind", c.loss_kind ? Json(to_string(*c.loss_kind)) : Json(nullptr)},
                {"eval_every", c.eval_every},
                {"eval_batch", c.eval_batch},
                {"mask_fraction", c.mask_fraction}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& section = "train") {
    detail::require_object(j, section);
    detail::reject_unknown(j, section, {"mode", "steps", "batch_size", "lr", "warmup_steps", "seed", "loss_kind", "eval_every",
                                        "eval_batch", "mask_fraction"});
    TrainConfig c;
    std::string mode = to_string(c.mode);
    detail::read(j, section, "mode", mode);
    c.mode = mode_from_string(mode);
    detail::read_size(j, section, "steps", c.steps);
    detail::read_size(j, section, "batch_size", c.batch_size);
    detail::read(j, section, "lr", c.lr);
    if (auto it = j.find("warmup_steps"); it != j.end() && !it->is_null()) {
        std::size_t w = 0;
        detail::read_size(j, section, "warmup_steps", w);
        c.warmup_steps = w;
    }
    detail::read(j, section, "seed", c.seed);
    if (auto it = j.find("loss_kind"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw ConfigError(section + ".loss_kind: expected a string");
        c.loss_kind = loss_from_string(it->get<std::string>());
    }
    detail::read_size(j, section, "eval_every", c.eval_every);
    detail::read_size(j, section, "eval_batch", c.eval_batch);
    detail::read(j, section, "mask_fraction", c.mask_fraction);
    return c;
}

// ----- records ----------------------------------------------------------------

inline Json to_json(const HistoryRecord& h) {
    return Json{{"step", h.step},
                {"L", h.loss},
                {"L_C", h.task_loss},
                {"L_S", h.sparsity_loss ? Json(*h.sparsity_loss) : Json(nullptr)},
                {"lambda", h.lambda ? Json(*h.lambda) : Json(nullptr)},
                {"metric", h.metric},
                {"active_fraction", h.active_fraction},
                {"trim_ratio", h.trim_ratio},
                {"lr", h.lr}};
}

inline Json to_json(const EvalSummary& e) {
    return Json{{"step", e.step},
                {"val_metric", e.val_metric},
                {"test_metric", e.test_metric},
                {"trim_ratio", e.trim_ratio},
                {"active_fraction", e.active_fraction}};
}

}  // namespace trimlab
