#pragma once

// Layer definitions, the maskable-site taxonomy, and the three toy encoder
// backbones (convolutional, transformer, conformer) with an optional 2-layer
// MLP probing head.
//
// Layout conventions: sequence tensors are channels-last (batch, time, width);
// linear weights are (out, in); conv weights are (out, in, kernel).
//
// Gates sit where removal is exact:
//   conv_t          after each block's ReLU, per output channel
//   attention       on each head's context before the output projection
//   feed-forward    on the hidden units after GELU
//   conformer conv  on the first pointwise output after GELU
// The residual stream and normalisation channels are never gated.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trimlab/autograd.hpp"
#include "trimlab/core.hpp"
#include "trimlab/tensor.hpp"

namespace trimlab {

enum class Backbone { conv_t, transformer_t, conformer_t };
enum class SiteKind { linear_columns, conv_channels, attention_heads, ffn_hidden };

inline const char* to_string(Backbone b) {
    switch (b) {
        case Backbone::conv_t: return "conv_t";
        case Backbone::transformer_t: return "transformer_t";
        case Backbone::conformer_t: return "conformer_t";
    }
    return "?";
}

inline Backbone backbone_from_string(const std::string& s) {
    if (s == "conv_t") return Backbone::conv_t;
    if (s == "transformer_t") return Backbone::transformer_t;
    if (s == "conformer_t") return Backbone::conformer_t;
    throw ConfigError("unknown backbone '" + s + "'");
}

inline const char* to_string(SiteKind k) {
    switch (k) {
        case SiteKind::linear_columns: return "linear_columns";
        case SiteKind::conv_channels: return "conv_channels";
        case SiteKind::attention_heads: return "attention_heads";
        case SiteKind::ffn_hidden: return "ffn_hidden";
    }
    return "?";
}

struct MaskableSite {
    std::string id;
    SiteKind kind;
    std::size_t unit_count;
    std::size_t block;
    std::string slot;
};

/// Surviving structure of one transformer/conformer layer.
struct LayerSpec {
    std::size_t heads = 4;
    std::size_t ffn_hidden = 128;
    std::size_t conv_channels = 64;  // conformer only

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct HeadSpec {
    std::size_t hidden = 256;
    std::size_t outputs = 10;

    friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct ModelSpec {
    Backbone backbone = Backbone::conv_t;
    std::size_t input_dim = 128;

    // conv_t
    std::vector<std::size_t> conv_channels;
    std::size_t conv_kernel = 3;
    std::size_t conv_stride = 2;
    std::size_t conv_padding = 1;

    // transformer_t / conformer_t
    std::size_t d_model = 64;
    std::size_t d_head = 16;
    std::vector<LayerSpec> layers;
    std::size_t depthwise_kernel = 7;

    std::optional<HeadSpec> head;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;

    bool is_attention() const { return backbone != Backbone::conv_t; }

    std::size_t embedding_dim() const {
        if (backbone == Backbone::conv_t) return conv_channels.empty() ? input_dim : conv_channels.back();
        return d_model;
    }

    /// Maskable sites in forward order. Sites whose unit count dropped to zero
    /// after trimming no longer exist.
    std::vector<MaskableSite> sites() const {
        std::vector<MaskableSite> out;
        auto add = [&](std::string id, SiteKind k, std::size_t n, std::size_t block, std::string slot) {
            if (n > 0) out.push_back({std::move(id), k, n, block, std::move(slot)});
        };
        if (backbone == Backbone::conv_t) {
            for (std::size_t i = 0; i < conv_channels.size(); ++i)
                add("block" + std::to_string(i) + ".channels", SiteKind::conv_channels, conv_channels[i], i, "channels");
            return out;
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            add(p + "attn_heads", SiteKind::attention_heads, layers[i].heads, i, "attn_heads");
            if (backbone == Backbone::conformer_t)
                add(p + "conv_channels", SiteKind::conv_channels, layers[i].conv_channels, i, "conv_channels");
            add(p + "ffn_hidden", SiteKind::ffn_hidden, layers[i].ffn_hidden, i, "ffn_hidden");
        }
        return out;
    }

    std::size_t total_units() const {
        std::size_t n = 0;
        for (const auto& s : sites()) n += s.unit_count;
        return n;
    }

    void validate() const {
        if (input_dim == 0) throw ConfigError("model.input_dim must be positive");
        if (backbone == Backbone::conv_t) {
            if (conv_channels.empty()) throw ConfigError("model.conv_channels must list at least one block");
            if (conv_kernel == 0 || conv_stride == 0) throw ConfigError("model.conv_kernel/conv_stride must be positive");
        } else {
            if (d_model == 0 || d_head == 0) throw ConfigError("model.d_model/d_head must be positive");
            if (layers.empty()) throw ConfigError("model.num_layers must be positive");
            if (depthwise_kernel % 2 == 0) throw ConfigError("model.depthwise_kernel must be odd");
        }
        if (head && (head->hidden == 0 || head->outputs == 0)) throw ConfigError("model.head sizes must be positive");
    }
};

/// Full-size spec for a backbone at its default toy scale.
inline ModelSpec default_spec(Backbone b, std::optional<HeadSpec> head = HeadSpec{}) {
    ModelSpec s;
    s.backbone = b;
    s.head = head;
    if (b == Backbone::conv_t) {
        s.conv_channels = {32, 64, 64, 128};
    } else {
        s.d_model = 64;
        s.d_head = 16;
        s.layers.assign(4, LayerSpec{4, 128, b == Backbone::conformer_t ? 64u : 0u});
    }
    return s;
}

/// Spec with transformer hyperparameters given in the usual form.
inline ModelSpec attention_spec(Backbone b, std::size_t d_model, std::size_t num_layers, std::size_t num_heads,
                                std::size_t ffn_hidden, std::size_t conv_channels, std::optional<HeadSpec> head) {
    if (num_heads == 0 || d_model % num_heads != 0)
        throw ConfigError("model: d_model (" + std::to_string(d_model) + ") must be divisible by num_heads (" +
                          std::to_string(num_heads) + ")");
    ModelSpec s;
    s.backbone = b;
    s.d_model = d_model;
    s.d_head = d_model / num_heads;
    s.layers.assign(num_layers, LayerSpec{num_heads, ffn_hidden, b == Backbone::conformer_t ? conv_channels : 0});
    s.head = head;
    s.validate();
    return s;
}

/// The spec that results from keeping `keep[site_id]` units at each site.
/// Sites absent from the map keep all their units.
inline ModelSpec derive_trimmed_spec(const ModelSpec& spec, const std::map<std::string, std::size_t>& keep) {
    ModelSpec out = spec;
    for (const auto& site : spec.sites()) {
        auto it = keep.find(site.id);
        if (it == keep.end()) continue;
        if (it->second > site.unit_count) throw PlanError("site " + site.id + ": keep count exceeds unit count");
        if (spec.backbone == Backbone::conv_t) {
            out.conv_channels[site.block] = it->second;
        } else if (site.kind == SiteKind::attention_heads) {
            out.layers[site.block].heads = it->second;
        } else if (site.kind == SiteKind::ffn_hidden) {
            out.layers[site.block].ffn_hidden = it->second;
        } else {
            out.layers[site.block].conv_channels = it->second;
        }
    }
    return out;
}

struct ParamCount {
    std::size_t encoder = 0;
    std::size_t head = 0;
    std::size_t total() const { return encoder + head; }
};

/// Closed-form parameter count of a spec.
inline ParamCount count_params(const ModelSpec& s) {
    ParamCount c;
    if (s.backbone == Backbone::conv_t) {
        std::size_t in = s.input_dim;
        for (auto ch : s.conv_channels) {
            c.encoder += ch * in * s.conv_kernel + ch;
            in = ch;
        }
    } else {
        const std::size_t D = s.d_model;
        c.encoder += D * s.input_dim + D;
        for (const auto& l : s.layers) {
            const std::size_t a = l.heads * s.d_head;
            c.encoder += 2 * D + 3 * (a * D + a) + D * a + D;
            if (s.backbone == Backbone::conformer_t)
                c.encoder += 2 * D + (l.conv_channels * D + l.conv_channels) + l.conv_channels * s.depthwise_kernel +
                             (D * l.conv_channels + D);
            c.encoder += 2 * D + (l.ffn_hidden * D + l.ffn_hidden) + (D * l.ffn_hidden + D);
        }
        c.encoder += 2 * D;
    }
    if (s.head) {
        const std::size_t e = s.embedding_dim();
        c.head = e * s.head->hidden + s.head->hidden + s.head->hidden * s.head->outputs + s.head->outputs;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct LinearLayer {
    Parameter<T> weight;  // (out, in)
    Parameter<T> bias;    // (out)
};

template <class T>
struct NormLayer {
    Parameter<T> gamma;
    Parameter<T> beta;
};

template <class T>
struct Conv1dLayer {
    Parameter<T> weight;  // (out, in, kernel)
    Parameter<T> bias;    // (out)
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <class T>
struct EncoderLayer {
    NormLayer<T> attn_norm;
    LinearLayer<T> q, k, v, o;

    NormLayer<T> conv_norm;  // conformer only
    LinearLayer<T> pw1;
    Parameter<T> dw;  // (channels, kernel)
    LinearLayer<T> pw2;

    NormLayer<T> ffn_norm;
    LinearLayer<T> fc1, fc2;
};

/// Parameters bound to a spec. Copyable; copies are independent models.
template <class T>
struct Model {
    ModelSpec spec;
    bool encoder_frozen = false;

    std::vector<Conv1dLayer<T>> blocks;  // conv_t
    LinearLayer<T> input_proj;           // attention backbones
    std::vector<EncoderLayer<T>> layers;
    NormLayer<T> final_norm;

    std::optional<LinearLayer<T>> head_fc1, head_fc2;

    template <class F>
    void for_each_encoder_parameter(F&& f) {
        visit_encoder(*this, f);
    }
    template <class F>
    void for_each_encoder_parameter(F&& f) const {
        visit_encoder(*this, f);
    }
    template <class F>
    void for_each_head_parameter(F&& f) {
        visit_head(*this, f);
    }
    template <class F>
    void for_each_head_parameter(F&& f) const {
        visit_head(*this, f);
    }
    template <class F>
    void for_each_parameter(F&& f) {
        visit_encoder(*this, f);
        visit_head(*this, f);
    }
    template <class F>
    void for_each_parameter(F&& f) const {
        visit_encoder(*this, f);
        visit_head(*this, f);
    }

    std::vector<Parameter<T>*> encoder_parameters() {
        std::vector<Parameter<T>*> out;
        for_each_encoder_parameter([&](Parameter<T>& p) { out.push_back(&p); });
        return out;
    }
    std::vector<Parameter<T>*> head_parameters() {
        std::vector<Parameter<T>*> out;
        for_each_head_parameter([&](Parameter<T>& p) { out.push_back(&p); });
        return out;
    }

    Parameter<T>* find(const std::string& name) {
        Parameter<T>* hit = nullptr;
        for_each_parameter([&](Parameter<T>& p) {
            if (p.name == name) hit = &p;
        });
        return hit;
    }

    ParamCount parameter_count() const {
        ParamCount c;
        for_each_encoder_parameter([&](const Parameter<T>& p) { c.encoder += p.value.size(); });
        for_each_head_parameter([&](const Parameter<T>& p) { c.head += p.value.size(); });
        return c;
    }

    void set_encoder_trainable(bool on) {
        for_each_encoder_parameter([&](Parameter<T>& p) { p.trainable = on; });
    }

    void freeze_encoder() {
        encoder_frozen = true;
        set_encoder_trainable(false);
    }

    template <class U>
    Model<U> cast() const {
        Model<U> m;
        m.spec = spec;
        m.encoder_frozen = encoder_frozen;
        auto conv = [](const Parameter<T>& p) { return Parameter<U>{p.name, p.value.template cast<U>(), {}, p.trainable}; };
        auto lin = [&](const LinearLayer<T>& l) { return LinearLayer<U>{conv(l.weight), conv(l.bias)}; };
        auto nrm = [&](const NormLayer<T>& l) { return NormLayer<U>{conv(l.gamma), conv(l.beta)}; };
        for (const auto& b : blocks) m.blocks.push_back({conv(b.weight), conv(b.bias), b.stride, b.padding});
        m.input_proj = lin(input_proj);
        for (const auto& l : layers) {
            EncoderLayer<U> e;
            e.attn_norm = nrm(l.attn_norm);
            e.q = lin(l.q);
            e.k = lin(l.k);
            e.v = lin(l.v);
            e.o = lin(l.o);
            e.conv_norm = nrm(l.conv_norm);
            e.pw1 = lin(l.pw1);
            e.dw = conv(l.dw);
            e.pw2 = lin(l.pw2);
            e.ffn_norm = nrm(l.ffn_norm);
            e.fc1 = lin(l.fc1);
            e.fc2 = lin(l.fc2);
            m.layers.push_back(std::move(e));
        }
        m.final_norm = nrm(final_norm);
        if (head_fc1) m.head_fc1 = lin(*head_fc1);
        if (head_fc2) m.head_fc2 = lin(*head_fc2);
        return m;
    }

   private:
    template <class M, class F>
    static void visit_encoder(M& m, F& f) {
        if (m.spec.backbone == Backbone::conv_t) {
            for (auto& b : m.blocks) {
                f(b.weight);
                f(b.bias);
            }
            return;
        }
        auto lin = [&](auto& l) {
            f(l.weight);
            f(l.bias);
        };
        auto nrm = [&](auto& l) {
            f(l.gamma);
            f(l.beta);
        };
        lin(m.input_proj);
        for (auto& l : m.layers) {
            nrm(l.attn_norm);
            lin(l.q);
            lin(l.k);
            lin(l.v);
            lin(l.o);
            if (m.spec.backbone == Backbone::conformer_t) {
                nrm(l.conv_norm);
                lin(l.pw1);
                f(l.dw);
                lin(l.pw2);
            }
            nrm(l.ffn_norm);
            lin(l.fc1);
            lin(l.fc2);
        }
        nrm(m.final_norm);
    }
    template <class M, class F>
    static void visit_head(M& m, F& f) {
        if (m.head_fc1) {
            f(m.head_fc1->weight);
            f(m.head_fc1->bias);
        }
        if (m.head_fc2) {
            f(m.head_fc2->weight);
            f(m.head_fc2->bias);
        }
    }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

/// Uniform(-b, b) with b = sqrt(gain / fan_in), from the parameter's own stream.
template <class T>
Parameter<T> init_weight(const std::string& name, Shape shape, std::size_t fan_in, double gain, std::uint64_t seed) {
    Parameter<T> p{name, Tensor<T>(std::move(shape)), {}, true};
    if (fan_in == 0) return p;
    Rng rng(seed_mix({seed, name_hash(name)}));
    const double bound = std::sqrt(gain / static_cast<double>(fan_in));
    for (auto& v : p.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return p;
}

template <class T>
Parameter<T> filled(const std::string& name, Shape shape, T value) {
    return Parameter<T>{name, Tensor<T>(std::move(shape), value), {}, true};
}

template <class T>
LinearLayer<T> init_linear(const std::string& name, std::size_t in, std::size_t out, double gain, std::uint64_t seed) {
    return {init_weight<T>(name + ".weight", {out, in}, in, gain, seed), filled<T>(name + ".bias", {out}, T(0))};
}

template <class T>
NormLayer<T> init_norm(const std::string& name, std::size_t n) {
    return {filled<T>(name + ".gamma", {n}, T(1)), filled<T>(name + ".beta", {n}, T(0))};
}

// Gain 6 is Kaiming-uniform for rectifier-followed layers; 3 keeps unit
// variance for layers feeding the residual stream or attention logits.
constexpr double kReluGain = 6.0;
constexpr double kLinearGain = 3.0;

}  // namespace detail

/// Fresh head for the model's current embedding size.
template <class T>
void reinit_head(Model<T>& m, std::uint64_t seed) {
    if (!m.spec.head) {
        m.head_fc1.reset();
        m.head_fc2.reset();
        return;
    }
    const auto& h = *m.spec.head;
    m.head_fc1 = detail::init_linear<T>("head.fc1", m.spec.embedding_dim(), h.hidden, detail::kReluGain,
                                        seed_mix({seed, 0x4EADull}));
    m.head_fc2 = detail::init_linear<T>("head.fc2", h.hidden, h.outputs, detail::kLinearGain, seed_mix({seed, 0x4EADull}));
}

/// Deterministic initialisation of a spec from a seed. Each parameter draws
/// from its own stream, keyed by name, so the same spec always yields the same
/// values regardless of construction order.
template <class T>
Model<T> build_backbone(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    using namespace detail;
    Model<T> m;
    m.spec = spec;
    if (spec.backbone == Backbone::conv_t) {
        std::size_t in = spec.input_dim;
        for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
            const std::string n = "encoder.block" + std::to_string(i) + ".conv";
            const std::size_t out = spec.conv_channels[i];
            m.blocks.push_back({init_weight<T>(n + ".weight", {out, in, spec.conv_kernel}, in * spec.conv_kernel,
                                               kReluGain, seed),
                                filled<T>(n + ".bias", {out}, T(0)), spec.conv_stride, spec.conv_padding});
            in = out;
        }
    } else {
        const std::size_t D = spec.d_model;
        m.input_proj = init_linear<T>("encoder.input_proj", spec.input_dim, D, kLinearGain, seed);
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const auto& ls = spec.layers[i];
            const std::string p = "encoder.layer" + std::to_string(i) + ".";
            const std::size_t a = ls.heads * spec.d_head;
            EncoderLayer<T> l;
            l.attn_norm = init_norm<T>(p + "attn_norm", D);
            l.q = init_linear<T>(p + "attn.q", D, a, kLinearGain, seed);
            l.k = init_linear<T>(p + "attn.k", D, a, kLinearGain, seed);
            l.v = init_linear<T>(p + "attn.v", D, a, kLinearGain, seed);
            l.o = init_linear<T>(p + "attn.o", a, D, kLinearGain, seed);
            if (spec.backbone == Backbone::conformer_t) {
                const std::size_t c = ls.conv_channels;
                l.conv_norm = init_norm<T>(p + "conv_norm", D);
                l.pw1 = init_linear<T>(p + "conv.pw1", D, c, kReluGain, seed);
                l.dw = init_weight<T>(p + "conv.dw.weight", {c, spec.depthwise_kernel}, spec.depthwise_kernel,
                                      kLinearGain, seed);
                l.pw2 = init_linear<T>(p + "conv.pw2", c, D, kLinearGain, seed);
            }
            l.ffn_norm = init_norm<T>(p + "ffn_norm", D);
            l.fc1 = init_linear<T>(p + "ffn.fc1", D, ls.ffn_hidden, kReluGain, seed);
            l.fc2 = init_linear<T>(p + "ffn.fc2", ls.ffn_hidden, D, kLinearGain, seed);
            m.layers.push_back(std::move(l));
        }
        m.final_norm = init_norm<T>("encoder.final_norm", D);
    }
    if (spec.head) reinit_head(m, seed);
    return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Called at every maskable site with the site's features; `axis` is the
/// unit axis of `x`. Implementations gate or modulate and return the result.
template <class T>
class SiteHook {
   public:
    virtual ~SiteHook() = default;
    virtual Var<T> apply(Tape<T>& tape, const MaskableSite& site, const Var<T>& x, std::size_t axis) = 0;
};

namespace detail {

template <class T>
Var<T> run_linear(Tape<T>& tape, const LinearLayer<T>& l, const Var<T>& x) {
    auto w = tape.param(l.weight);
    auto b = tape.param(l.bias);
    return linear(x, w, &b);
}

template <class T>
Var<T> run_norm(Tape<T>& tape, const NormLayer<T>& n, const Var<T>& x) {
    return layer_norm(x, tape.param(n.gamma), tape.param(n.beta));
}

template <class T>
Var<T> at_site(Tape<T>& tape, SiteHook<T>* hook, const std::vector<MaskableSite>& sites, const std::string& id,
               const Var<T>& x, std::size_t axis) {
    if (!hook) return x;
    for (const auto& s : sites)
        if (s.id == id) return hook->apply(tape, s, x, axis);
    return x;  // site removed entirely
}

template <class T>
Tensor<T> positional_encoding(std::size_t batch, std::size_t len, std::size_t d) {
    Tensor<T> pe(Shape{batch, len, d});
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const T v = static_cast<T>(i % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate));
            for (std::size_t b = 0; b < batch; ++b) pe[(b * len + t) * d + i] = v;
        }
    return pe;
}

template <class T>
Var<T> attention_block(Tape<T>& tape, const ModelSpec& spec, const EncoderLayer<T>& l, std::size_t heads,
                       const Var<T>& x, SiteHook<T>* hook, const std::vector<MaskableSite>& sites, std::size_t index) {
    const std::size_t B = x.shape()[0], L = x.shape()[1], dh = spec.d_head;
    if (heads == 0) {
        auto empty = tape.constant(Tensor<T>(Shape{B, L, 0}));
        return run_linear(tape, l.o, empty);
    }
    auto split = [&](const LinearLayer<T>& proj) {
        auto y = reshape(run_linear(tape, proj, x), {B, L, heads, dh});
        return reshape(transpose(y, 1, 2), {B * heads, L, dh});
    };
    auto q = split(l.q), k = split(l.k), v = split(l.v);
    auto scores = scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
    auto ctx = reshape(bmm(softmax(scores), v), {B, heads, L, dh});
    ctx = at_site(tape, hook, sites, "layer" + std::to_string(index) + ".attn_heads", ctx, 1);
    auto merged = reshape(transpose(ctx, 1, 2), {B, L, heads * dh});
    return run_linear(tape, l.o, merged);
}

}  // namespace detail

/// Encoder body before the final normalisation (conv_t has none), shaped
/// (batch, positions, width). For conv_t the positions are downsampled steps.
template <class T>
Var<T> forward_trunk(const Model<T>& model, Tape<T>& tape, const Var<T>& features, SiteHook<T>* hook = nullptr) {
    using namespace detail;
    const auto& spec = model.spec;
    const auto& fs = features.shape();
    if (fs.size() != 3 || fs[2] != spec.input_dim || fs[1] == 0)
        throw ShapeError("forward_encoder", fs, Shape{0, 0, spec.input_dim}, "expected (batch, frames, features)");
    const auto sites = spec.sites();
    if (spec.backbone == Backbone::conv_t) {
        Var<T> h = features;
        for (std::size_t i = 0; i < model.blocks.size(); ++i) {
            const auto& b = model.blocks[i];
            h = relu(conv1d(h, tape.param(b.weight), tape.param(b.bias),
                            b.stride, b.padding));
            h = at_site(tape, hook, sites, "block" + std::to_string(i) + ".channels", h, 2);
        }
        return h;
    }
    const std::size_t B = fs[0], L = fs[1], D = spec.d_model;
    Var<T> h = add(run_linear(tape, model.input_proj, features), tape.constant(positional_encoding<T>(B, L, D)));
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        const auto& ls = spec.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        h = add(h, attention_block(tape, spec, l, ls.heads, run_norm(tape, l.attn_norm, h), hook, sites, i));
        if (spec.backbone == Backbone::conformer_t) {
            auto c = gelu(run_linear(tape, l.pw1, run_norm(tape, l.conv_norm, h)));
            c = at_site(tape, hook, sites, p + "conv_channels", c, 2);
            if (ls.conv_channels > 0)
                c = depthwise_conv1d(c, tape.param(l.dw), spec.depthwise_kernel / 2);
            h = add(h, run_linear(tape, l.pw2, c));
        }
        auto f = gelu(run_linear(tape, l.fc1, run_norm(tape, l.ffn_norm, h)));
        f = at_site(tape, hook, sites, p + "ffn_hidden", f, 2);
        h = add(h, run_linear(tape, l.fc2, f));
    }
    return h;
}

/// Per-position encoder states, (batch, positions, width).
template <class T>
Var<T> forward_encoder_states(const Model<T>& model, Tape<T>& tape, const Var<T>& features, SiteHook<T>* hook = nullptr) {
    auto h = forward_trunk(model, tape, features, hook);
    return model.spec.is_attention() ? detail::run_norm(tape, model.final_norm, h) : h;
}

/// Time-pooled embedding, (batch, embedding_dim).
template <class T>
Var<T> forward_encoder(const Model<T>& model, Tape<T>& tape, const Var<T>& features, SiteHook<T>* hook = nullptr) {
    return mean_axis(forward_encoder_states(model, tape, features, hook), 1);
}

template <class T>
Var<T> forward_head(const Model<T>& model, Tape<T>& tape, const Var<T>& embedding) {
    if (!model.head_fc1 || !model.head_fc2) throw ConfigError("forward_head: model has no head");
    const auto& es = embedding.shape();
    if (es.size() != 2 || es[1] != model.head_fc1->weight.value.dim(1))
        throw ShapeError("forward_head", es, model.head_fc1->weight.value.shape());
    return detail::run_linear(tape, *model.head_fc2, relu(detail::run_linear(tape, *model.head_fc1, embedding)));
}

/// Inference convenience: embedding and logits for a batch on a scratch tape.
template <class T>
struct ForwardResult {
    Tensor<T> embedding;
    Tensor<T> logits;
};

template <class T>
ForwardResult<T> infer(const Model<T>& model, const Tensor<T>& features, SiteHook<T>* hook = nullptr) {
    Tape<T> tape;
    auto x = tape.constant(features);
    auto e = forward_encoder(model, tape, x, hook);
    ForwardResult<T> r{e.value(), {}};
    if (model.head_fc1) r.logits = forward_head(model, tape, e).value();
    return r;
}

}  // namespace trimlab
