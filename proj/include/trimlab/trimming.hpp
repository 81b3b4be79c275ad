#pragma once

// Structured surgery: turn a mask assignment into index slices, cut the
// surviving subnetwork out of a model, and check it against the masked model.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trimlab/masking.hpp"
#include "trimlab/nn.hpp"

namespace trimlab {

/// Keep `keep` along `axis` of parameter `param`.
struct SliceDirective {
    std::string param;
    std::size_t axis = 0;
    std::vector<std::size_t> keep;
};

struct TrimPlan {
    ModelSpec source;
    std::map<std::string, std::vector<std::size_t>> keep;  // site id -> sorted unit indices
    std::vector<SliceDirective> directives;
};

struct TrimReport {
    std::size_t params_before = 0;  // encoder only
    std::size_t params_after = 0;
    double trimming_ratio = 0.0;
    std::size_t head_params_before = 0;
    std::size_t head_params_after = 0;
    std::map<std::string, std::size_t> removed_units;
    std::map<std::string, std::size_t> removed_params;  // per sliced parameter
    std::optional<std::uint64_t> bytes_before;
    std::optional<std::uint64_t> bytes_after;
    std::optional<double> max_deviation;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::size_t> expand_heads(const std::vector<std::size_t>& heads, std::size_t d_head) {
    std::vector<std::size_t> out;
    out.reserve(heads.size() * d_head);
    for (auto h : heads)
        for (std::size_t j = 0; j < d_head; ++j) out.push_back(h * d_head + j);
    return out;
}

}  // namespace detail

/// Builds the slicing directives for explicit keep-indices. Throws PlanError
/// on unknown sites or indices that are unsorted, repeated or out of range.
inline TrimPlan plan_from_keep(const ModelSpec& spec, std::map<std::string, std::vector<std::size_t>> keep) {
    TrimPlan plan{spec, {}, {}};
    const auto sites = spec.sites();
    for (const auto& s : sites) {
        auto it = keep.find(s.id);
        if (it == keep.end()) throw PlanError("trim plan is missing site " + s.id);
        const auto& k = it->second;
        for (std::size_t i = 0; i < k.size(); ++i) {
            if (k[i] >= s.unit_count)
                throw PlanError("site " + s.id + ": keep index " + std::to_string(k[i]) + " out of range");
            if (i > 0 && k[i] <= k[i - 1]) throw PlanError("site " + s.id + ": keep indices must be strictly increasing");
        }
    }
    for (const auto& [id, _] : keep)
        if (std::none_of(sites.begin(), sites.end(), [&](const MaskableSite& s) { return s.id == id; }))
            throw PlanError("trim plan names unknown site " + id);
    plan.keep = std::move(keep);

    auto slice = [&](std::string param, std::size_t axis, std::vector<std::size_t> idx) {
        plan.directives.push_back({std::move(param), axis, std::move(idx)});
    };
    if (spec.backbone == Backbone::conv_t) {
        for (const auto& s : sites) {
            const auto& k = plan.keep.at(s.id);
            const std::string p = "encoder.block" + std::to_string(s.block) + ".conv.";
            slice(p + "weight", 0, k);
            slice(p + "bias", 0, k);
            if (s.block + 1 < spec.conv_channels.size())
                slice("encoder.block" + std::to_string(s.block + 1) + ".conv.weight", 1, k);
            else if (spec.head)
                slice("head.fc1.weight", 1, k);
        }
        return plan;
    }
    for (const auto& s : sites) {
        const auto& k = plan.keep.at(s.id);
        const std::string p = "encoder.layer" + std::to_string(s.block) + ".";
        switch (s.kind) {
            case SiteKind::attention_heads: {
                const auto cols = detail::expand_heads(k, spec.d_head);
                for (const char* proj : {"q", "k", "v"}) {
                    slice(p + "attn." + proj + ".weight", 0, cols);
                    slice(p + "attn." + proj + ".bias", 0, cols);
                }
                slice(p + "attn.o.weight", 1, cols);
                break;
            }
            case SiteKind::ffn_hidden:
                slice(p + "ffn.fc1.weight", 0, k);
                slice(p + "ffn.fc1.bias", 0, k);
                slice(p + "ffn.fc2.weight", 1, k);
                break;
            case SiteKind::conv_channels:
                slice(p + "conv.pw1.weight", 0, k);
                slice(p + "conv.pw1.bias", 0, k);
                slice(p + "conv.dw.weight", 0, k);
                slice(p + "conv.pw2.weight", 1, k);
                break;
            case SiteKind::linear_columns:
                throw PlanError("site " + s.id + ": linear_columns sites are not produced by shipped backbones");
        }
    }
    return plan;
}

/// Keeps exactly the units whose gate is 1.
inline TrimPlan plan_trim(const ModelSpec& spec, const MaskAssignment& masks) {
    validate_assignment(spec, masks);
    std::map<std::string, std::vector<std::size_t>> keep;
    for (const auto& [id, g] : masks) {
        auto& k = keep[id];
        for (std::size_t i = 0; i < g.size(); ++i)
            if (g[i]) k.push_back(i);
    }
    return plan_from_keep(spec, std::move(keep));
}

template <class T>
TrimPlan plan_trim(const Model<T>& model, const MaskAssignment& masks) {
    return plan_trim(model.spec, masks);
}

/// Slices parameters in place; returns the removed element count per
/// parameter. `lookup` maps a parameter name to the parameter or nullptr.
template <class T, class Lookup>
std::map<std::string, std::size_t> apply_directives(Lookup&& lookup, const std::vector<SliceDirective>& directives) {
    std::map<std::string, std::size_t> before;
    std::map<std::string, Parameter<T>*> touched;
    for (const auto& d : directives) {
        Parameter<T>* p = lookup(d.param);
        if (!p) throw PlanError("trim directive references unknown parameter " + d.param);
        if (d.axis >= p->value.rank()) throw PlanError("trim directive axis out of range for " + d.param);
        for (auto i : d.keep)
            if (i >= p->value.dim(d.axis)) throw PlanError("trim directive index out of range for " + d.param);
        before.emplace(d.param, p->value.size());
        touched[d.param] = p;
        p->value = take_along(p->value, d.axis, std::span<const std::size_t>(d.keep));
        p->grad = Tensor<T>();
    }
    std::map<std::string, std::size_t> removed;
    for (const auto& [name, n] : before) removed[name] = n - touched[name]->value.size();
    return removed;
}

/// Copies the surviving parameters into a model of the trimmed spec. The
/// input model is left untouched.
template <class T>
std::pair<Model<T>, TrimReport> apply_trim(const Model<T>& model, const TrimPlan& plan) {
    if (!(plan.source == model.spec)) throw PlanError("trim plan was derived from a different model spec");
    std::map<std::string, std::size_t> kept_counts;
    for (const auto& [id, k] : plan.keep) kept_counts[id] = k.size();
    Model<T> out = model;
    out.spec = derive_trimmed_spec(model.spec, kept_counts);

    TrimReport rep;
    rep.removed_params = apply_directives<T>([&](const std::string& n) { return out.find(n); }, plan.directives);

    // The sliced shapes must be exactly those a fresh build of the trimmed spec has.
    const auto fresh = build_backbone<T>(out.spec, 0);
    std::vector<Shape> got, want;
    out.for_each_parameter([&](const Parameter<T>& p) { got.push_back(p.value.shape()); });
    fresh.for_each_parameter([&](const Parameter<T>& p) { want.push_back(p.value.shape()); });
    if (got != want) throw PlanError("trim plan is inconsistent with the derived spec");

    const auto before = model.parameter_count(), after = out.parameter_count();
    rep.params_before = before.encoder;
    rep.params_after = after.encoder;
    rep.head_params_before = before.head;
    rep.head_params_after = after.head;
    rep.trimming_ratio =
        before.encoder ? 1.0 - static_cast<double>(after.encoder) / static_cast<double>(before.encoder) : 0.0;
    for (const auto& s : model.spec.sites()) {
        const std::size_t kept = plan.keep.at(s.id).size();
        rep.removed_units[s.id] = s.unit_count - kept;
        if (kept == 0) {
            if (model.spec.backbone == Backbone::conv_t)
                rep.warnings.push_back(s.id + ": every channel removed; downstream blocks reduce to bias-driven constants");
            else
                rep.warnings.push_back(s.id + ": every unit removed; the sub-block contributes only its output bias");
        }
    }
    return {std::move(out), std::move(rep)};
}

struct Deviation {
    double embedding = 0.0;
    double logits = 0.0;
    double max() const { return std::max(embedding, logits); }
};

/// Largest |masked - trimmed| over a batch of probe inputs, at the embedding
/// and at the logits. For conv_t the trimmed embedding is compared against
/// the kept channels; removed channels of the masked embedding must be zero.
template <class T>
Deviation verify_equivalence(const Model<T>& masked_model, const MaskAssignment& masks, const Model<T>& trimmed,
                             const TrimPlan& plan, const Tensor<T>& probes) {
    const auto ref = infer_masked(masked_model, probes, masks);
    const auto got = infer(trimmed, probes);
    Deviation d;
    const std::size_t batch = probes.dim(0);
    if (masked_model.spec.backbone == Backbone::conv_t) {
        const std::string last = "block" + std::to_string(masked_model.spec.conv_channels.size() - 1) + ".channels";
        const auto& keep = plan.keep.at(last);
        const std::size_t full = ref.embedding.dim(1), cut = got.embedding.dim(1);
        if (cut != keep.size()) throw ShapeError("verify_equivalence", ref.embedding.shape(), got.embedding.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            std::vector<bool> kept(full, false);
            for (std::size_t j = 0; j < cut; ++j) {
                kept[keep[j]] = true;
                d.embedding = std::max(d.embedding, static_cast<double>(std::abs(ref.embedding[b * full + keep[j]] -
                                                                                 got.embedding[b * cut + j])));
            }
            for (std::size_t j = 0; j < full; ++j)
                if (!kept[j]) d.embedding = std::max(d.embedding, static_cast<double>(std::abs(ref.embedding[b * full + j])));
        }
    } else {
        d.embedding = static_cast<double>(max_abs_diff(ref.embedding, got.embedding));
    }
    if (ref.logits.size() || got.logits.size()) d.logits = static_cast<double>(max_abs_diff(ref.logits, got.logits));
    return d;
}

}  // namespace trimlab
