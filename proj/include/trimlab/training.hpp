#pragma once

// Optimisation: Adam, task losses and metrics, and the training loops for
// pretext pretraining and the downstream modes (probe, mask, ssf, scratch).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "trimlab/data.hpp"
#include "trimlab/masking.hpp"
#include "trimlab/nn.hpp"
#include "trimlab/trimming.hpp"

namespace trimlab {

enum class Mode { pretrain, probe, mask, ssf, scratch };
enum class LossKind { cross_entropy, binary_cross_entropy, masked_mse };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::pretrain: return "pretrain";
        case Mode::probe: return "probe";
        case Mode::mask: return "mask";
        case Mode::ssf: return "ssf";
        case Mode::scratch: return "scratch";
    }
    return "?";
}

inline Mode mode_from_string(const std::string& s) {
    if (s == "pretrain") return Mode::pretrain;
    if (s == "probe") return Mode::probe;
    if (s == "mask") return Mode::mask;
    if (s == "ssf") return Mode::ssf;
    if (s == "scratch") return Mode::scratch;
    throw ConfigError("train.mode: unknown mode '" + s + "'");
}

inline const char* to_string(LossKind k) {
    switch (k) {
        case LossKind::cross_entropy: return "cross_entropy";
        case LossKind::binary_cross_entropy: return "binary_cross_entropy";
        case LossKind::masked_mse: return "masked_mse";
    }
    return "?";
}

inline LossKind loss_from_string(const std::string& s) {
    if (s == "cross_entropy") return LossKind::cross_entropy;
    if (s == "binary_cross_entropy") return LossKind::binary_cross_entropy;
    if (s == "masked_mse") return LossKind::masked_mse;
    throw ConfigError("train.loss_kind: unknown loss '" + s + "'");
}

inline LossKind default_loss(TaskKind t) {
    switch (t) {
        case TaskKind::tone_class: return LossKind::cross_entropy;
        case TaskKind::chord_tags: return LossKind::binary_cross_entropy;
        case TaskKind::pretext: return LossKind::masked_mse;
    }
    return LossKind::cross_entropy;
}

struct TrainConfig {
    Mode mode = Mode::probe;
    std::size_t steps = 5000;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::optional<std::size_t> warmup_steps;  // empty: 25% of steps for scratch, 0 otherwise
    std::uint64_t seed = 0;
    std::optional<LossKind> loss_kind;  // empty: chosen from the task
    SparsityConfig sparsity;
    std::size_t eval_every = 500;
    double mask_fraction = 0.3;  // pretrain: share of frames hidden
    std::size_t eval_batch = 100;
    bool freeze_modulation = false;  // ssf: keep gamma = 1, beta = 0

    std::size_t resolved_warmup() const {
        if (warmup_steps) return *warmup_steps;
        return mode == Mode::scratch ? steps / 4 : 0;
    }

    void validate() const {
        if (steps == 0) throw ConfigError("train.steps must be positive");
        if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
        if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
        if (resolved_warmup() > steps) throw ConfigError("train.warmup_steps must not exceed train.steps");
        if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
        if (!(mask_fraction >= 0 && mask_fraction <= 1)) throw ConfigError("train.mask_fraction must lie in [0, 1]");
        if (eval_batch == 0) throw ConfigError("train.eval_batch must be positive");
        sparsity.validate();
    }
};

/// Learning rate at 0-based step `s`: linear ramp lr*s/warmup, then constant.
inline double lr_at(const TrainConfig& c, std::size_t s) {
    const std::size_t w = c.resolved_warmup();
    if (s < w) return c.lr * static_cast<double>(s) / static_cast<double>(w);
    return c.lr;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
struct AdamState {
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

    std::vector<std::string> names;
    std::vector<Tensor<T>> m, v;
    std::uint64_t step = 0;
    std::uint64_t skipped = 0;
};

/// One bias-corrected Adam update. A step with any non-finite gradient is
/// skipped (state untouched) and reported by returning false.
template <class T>
bool adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& st, double lr) {
    if (st.m.empty()) {
        for (auto* p : params) {
            st.names.push_back(p->name);
            st.m.emplace_back(p->value.shape());
            st.v.emplace_back(p->value.shape());
        }
    }
    if (st.m.size() != params.size()) throw ShapeError("adam_step", Shape{st.m.size()}, Shape{params.size()}, "parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto* p = params[i];
        if (p->grad.shape() != p->value.shape()) throw ShapeError("adam_step", p->value.shape(), p->grad.shape(), p->name);
        if (st.m[i].shape() != p->value.shape()) throw ShapeError("adam_step", st.m[i].shape(), p->value.shape(), p->name);
        if (!p->grad.all_finite()) {
            ++st.skipped;
            return false;
        }
    }
    ++st.step;
    const T b1 = static_cast<T>(AdamState<T>::beta1), b2 = static_cast<T>(AdamState<T>::beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(AdamState<T>::beta1, static_cast<double>(st.step)));
    const T c2 = static_cast<T>(1.0 - std::pow(AdamState<T>::beta2, static_cast<double>(st.step)));
    const T rate = static_cast<T>(lr), eps = static_cast<T>(AdamState<T>::eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* m = st.m[i].data();
        T* v = st.v[i].data();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

/// Mean-over-batch task loss of (batch, outputs) logits.
template <class T>
Var<T> task_loss(const Var<T>& logits, LossKind kind, std::span<const int> labels,
                 const std::type_identity_t<Tensor<T>>* tags = nullptr) {
    switch (kind) {
        case LossKind::cross_entropy: return cross_entropy(logits, labels);
        case LossKind::binary_cross_entropy:
            if (!tags) throw ConfigError("task_loss: binary cross-entropy needs tag targets");
            return bce_with_logits(logits, *tags);
        case LossKind::masked_mse: break;
    }
    throw ConfigError("task_loss: masked_mse is only used by pretraining");
}

struct MetricResult {
    double value = 0.0;
    std::vector<std::string> diagnostics;
};

/// Class-frequency-weighted mean of per-class recall over the classes present.
inline MetricResult weighted_accuracy(std::span<const int> predicted, std::span<const int> targets, std::size_t classes) {
    if (targets.empty()) throw std::invalid_argument("weighted_accuracy: empty evaluation set");
    if (predicted.size() != targets.size()) throw ShapeError("weighted_accuracy", Shape{predicted.size()}, Shape{targets.size()});
    std::vector<std::size_t> count(classes, 0), hit(classes, 0);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto c = static_cast<std::size_t>(targets[i]);
        if (targets[i] < 0 || c >= classes) throw std::out_of_range("weighted_accuracy: label out of range");
        ++count[c];
        hit[c] += predicted[i] == targets[i];
    }
    MetricResult r;
    const double n = static_cast<double>(targets.size());
    for (std::size_t c = 0; c < classes; ++c) {
        if (count[c] == 0) {
            r.diagnostics.push_back("class " + std::to_string(c) + " absent from targets; excluded");
            continue;
        }
        r.value += (static_cast<double>(count[c]) / n) * (static_cast<double>(hit[c]) / static_cast<double>(count[c]));
    }
    return r;
}

/// Average precision of one tag: precision at each positive in descending
/// score order, ties broken by index. Returns nullopt without positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t tp = 0;
    double sum = 0;
    for (std::size_t r = 0; r < order.size(); ++r)
        if (labels[order[r]]) {
            ++tp;
            sum += static_cast<double>(tp) / static_cast<double>(r + 1);
        }
    if (tp == 0) return std::nullopt;
    return sum / static_cast<double>(tp);
}

/// Mean over tags of average precision; scores and targets are (n, tags).
inline MetricResult mean_average_precision(const Tensor<double>& scores, const Tensor<double>& targets) {
    if (scores.shape() != targets.shape() || scores.rank() != 2) throw ShapeError("mean_average_precision", scores.shape(), targets.shape());
    if (scores.dim(0) == 0) throw std::invalid_argument("mean_average_precision: empty evaluation set");
    const std::size_t n = scores.dim(0), k = scores.dim(1);
    MetricResult r;
    std::size_t used = 0;
    for (std::size_t t = 0; t < k; ++t) {
        std::vector<double> s(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = scores[i * k + t];
            y[i] = targets[i * k + t] > 0.5;
        }
        auto ap = average_precision(s, y);
        if (!ap) {
            r.diagnostics.push_back("tag " + std::to_string(t) + " has no positives; excluded");
            continue;
        }
        r.value += *ap;
        ++used;
    }
    if (used) r.value /= static_cast<double>(used);
    return r;
}

// ---------------------------------------------------------------------------
// Scale-and-shift modulation
// ---------------------------------------------------------------------------

template <class T>
struct SsfSite {
    std::string site_id;
    Parameter<T> gamma;
    Parameter<T> beta;
};

template <class T>
std::vector<SsfSite<T>> make_ssf_sites(const ModelSpec& spec) {
    std::vector<SsfSite<T>> out;
    for (const auto& s : spec.sites())
        out.push_back({s.id, Parameter<T>{"ssf." + s.id + ".gamma", Tensor<T>(Shape{s.unit_count}, T(1)), {}, true},
                       Parameter<T>{"ssf." + s.id + ".beta", Tensor<T>(Shape{s.unit_count}, T(0)), {}, true}});
    return out;
}

/// gamma * f + beta along the unit axis of every site.
template <class T>
class SsfHook : public SiteHook<T> {
   public:
    explicit SsfHook(const std::vector<SsfSite<T>>& sites) : sites_(sites) {}

    Var<T> apply(Tape<T>& tape, const MaskableSite& site, const Var<T>& x, std::size_t axis) override {
        for (const auto& s : sites_)
            if (s.site_id == site.id) return add_axis(mul_axis(x, tape.param(s.gamma), axis), tape.param(s.beta), axis);
        throw PlanError("no modulation parameters for site " + site.id);
    }

   private:
    const std::vector<SsfSite<T>>& sites_;
};

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct HistoryRecord {
    std::size_t step = 0;
    double loss = 0;       // L
    double task_loss = 0;  // L_C (reconstruction MSE when pretraining)
    std::optional<double> sparsity_loss;
    std::optional<double> lambda;
    double metric = 0;  // validation metric (reconstruction MSE when pretraining)
    double active_fraction = 1.0;
    double trim_ratio = 0.0;
    double lr = 0;
};

struct EvalSummary {
    std::size_t step = 0;
    double val_metric = 0;
    double test_metric = 0;
    double trim_ratio = 0;
    double active_fraction = 1.0;
};

template <class T>
struct TrainResult {
    Model<T> model;
    std::vector<MaskSite<T>> masks;  // mask mode
    std::vector<SsfSite<T>> ssf;     // ssf mode
    AdamState<T> optimizer;
    std::vector<HistoryRecord> history;
    EvalSummary final_eval;
    EvalSummary best;  // highest validation metric; ties go to the later eval
    std::optional<MaskAssignment> best_masks;
    std::vector<std::string> diagnostics;
    std::size_t skipped_steps = 0;
};

/// Sequential epoch-shuffled index stream, fully determined by its seed.
class BatchStream {
   public:
    BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(batch), rng_(seed) {
        if (n == 0) throw ConfigError("training split is empty");
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_.begin(), order_.end());
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (out.size() < batch_) {
            if (pos_ == order_.size()) {
                rng_.shuffle(order_.begin(), order_.end());
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

   private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t pos_ = 0;
    Rng rng_;
};

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) { return seed_mix({seed, tag}); }
constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kPretextStream = 0x3A5C;

/// Task metric of a model over a dataset: w-Acc for single-label, mAP for
/// multi-label tasks.
template <class T>
MetricResult evaluate(const Model<T>& model, SiteHook<T>* hook, const Dataset& data, std::size_t batch = 100) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty evaluation set");
    const std::size_t n = data.size();
    std::vector<int> predicted;
    Tensor<double> scores;
    for (std::size_t lo = 0; lo < n; lo += batch) {
        std::vector<std::size_t> idx(std::min(batch, n - lo));
        std::iota(idx.begin(), idx.end(), lo);
        auto x = data.batch_features(idx).template cast<T>();
        const auto logits = infer(model, x, hook).logits;
        const std::size_t k = logits.dim(1);
        if (scores.rank() == 0) scores = Tensor<double>(Shape{n, k});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const T* row = logits.data() + i * k;
            predicted.push_back(static_cast<int>(std::max_element(row, row + k) - row));
            for (std::size_t j = 0; j < k; ++j) scores[(lo + i) * k + j] = static_cast<double>(row[j]);
        }
    }
    if (data.task == TaskKind::tone_class) return weighted_accuracy(predicted, data.labels, scores.dim(1));
    return mean_average_precision(scores, data.tags.template cast<double>());
}

namespace detail {

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& ps) {
    for (auto* p : ps) p->zero_grad();
}

template <class T>
void require_finite_loss(const Var<T>& loss, std::size_t step) {
    if (!std::isfinite(static_cast<double>(loss.value().item())))
        throw NumericError("training", "non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

// ----- pretraining ---------------------------------------------------------

/// Frames hidden for one example: round(fraction * frames) distinct indices.
inline std::vector<std::size_t> pick_masked_frames(Rng& rng, std::size_t frames, double fraction) {
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(frames)));
    std::vector<std::size_t> all(frames);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all.begin(), all.end());
    all.resize(std::min(k, frames));
    std::sort(all.begin(), all.end());
    return all;
}

/// Reconstruction of hidden frames from per-position encoder states. Position p
/// of P reconstructs input frames [p*g, (p+1)*g) with g = ceil(frames / P).
template <class T>
struct PretextHead {
    LinearLayer<T> proj;
    std::size_t group = 1;
};

template <class T>
PretextHead<T> make_pretext_head(const ModelSpec& spec, std::size_t frames, std::uint64_t seed) {
    Model<T> probe = build_backbone<T>(spec, 0);
    Tape<T> tape;
    const auto states = forward_encoder_states(probe, tape, tape.constant(Tensor<T>(Shape{1, frames, spec.input_dim}))).shape();
    const std::size_t positions = states[1], width = states[2];
    const std::size_t group = (frames + positions - 1) / positions;
    return {detail::init_linear<T>("pretext.proj", width, group * spec.input_dim, detail::kLinearGain,
                                   seed_mix({seed, 0x9E7})),
            group};
}

/// Masked-frame MSE on one batch. Returns nullopt when no frame is hidden.
template <class T>
std::optional<Var<T>> pretext_loss(const Model<T>& model, const PretextHead<T>& head, Tape<T>& tape, const Tensor<T>& x,
                                   Rng& rng, double fraction) {
    const std::size_t B = x.dim(0), L = x.dim(1), F = x.dim(2);
    Tensor<T> input = x;
    std::vector<std::vector<std::size_t>> hidden(B);
    std::size_t count = 0;
    for (std::size_t b = 0; b < B; ++b) {
        hidden[b] = pick_masked_frames(rng, L, fraction);
        count += hidden[b].size();
        for (auto f : hidden[b]) std::fill_n(input.data() + (b * L + f) * F, F, T(0));
    }
    auto states = forward_encoder_states(model, tape, tape.constant(std::move(input)));
    auto pred = detail::run_linear(tape, head.proj, states);  // (B, P, group*F)
    if (count == 0) return std::nullopt;
    const std::size_t P = pred.shape()[1], G = head.group;
    Tensor<T> target(pred.shape()), weight(pred.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (auto f : hidden[b]) {
            const std::size_t p = f / G, slot = f % G;
            if (p >= P) continue;
            const std::size_t base = ((b * P + p) * G + slot) * F;
            std::copy_n(x.data() + (b * L + f) * F, F, target.data() + base);
            std::fill_n(weight.data() + base, F, T(1));
        }
    auto diff = mul(sub(pred, tape.constant(std::move(target))), tape.constant(std::move(weight)));
    return scale(sum(mul(diff, diff)), T(1) / static_cast<T>(count * F));
}

template <class T>
double pretext_eval(const Model<T>& model, const PretextHead<T>& head, const Dataset& data, double fraction,
                    std::uint64_t seed, std::size_t batch) {
    Rng rng(seed);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < data.size(); lo += batch) {
        std::vector<std::size_t> idx(std::min(batch, data.size() - lo));
        std::iota(idx.begin(), idx.end(), lo);
        Tape<T> tape;
        auto l = pretext_loss(model, head, tape, data.batch_features(idx).template cast<T>(), rng, fraction);
        total += l ? static_cast<double>(l->value().item()) : 0.0;
        ++batches;
    }
    return batches ? total / static_cast<double>(batches) : 0.0;
}

using HistorySink = std::function<void(const HistoryRecord&)>;

/// Trains every encoder parameter on masked-frame reconstruction, then marks
/// the encoder frozen. The reconstruction head is discarded.
template <class T>
TrainResult<T> run_pretrain(Model<T> model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                            const HistorySink& sink = {}) {
    cfg.validate();
    if (cfg.mode != Mode::pretrain) throw ConfigError("run_pretrain: train.mode must be pretrain");
    TrainResult<T> res;
    model.encoder_frozen = false;
    model.set_encoder_trainable(true);
    auto head = make_pretext_head<T>(model.spec, train.frames(), cfg.seed);
    std::vector<Parameter<T>*> params = model.encoder_parameters();
    params.push_back(&head.proj.weight);
    params.push_back(&head.proj.bias);
    BatchStream stream(train.size(), cfg.batch_size, stream_seed(cfg.seed, kDataStream));
    Rng mask_rng(stream_seed(cfg.seed, kPretextStream));
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const auto idx = stream.next();
        detail::zero_grads(params);
        Tape<T> tape;
        auto loss = pretext_loss(model, head, tape, train.batch_features(idx).template cast<T>(), mask_rng, cfg.mask_fraction);
        double lv = 0;
        if (loss) {
            detail::require_finite_loss(*loss, s);
            lv = static_cast<double>(loss->value().item());
            tape.backward(*loss);
            if (!adam_step(params, res.optimizer, lr_at(cfg, s)))
                res.diagnostics.push_back("step " + std::to_string(s) + ": non-finite gradient, update skipped");
        }
        if ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps) {
            HistoryRecord h;
            h.step = s + 1;
            h.loss = h.task_loss = lv;
            h.metric = pretext_eval(model, head, val, cfg.mask_fraction, stream_seed(cfg.seed, 0xE7A1), cfg.eval_batch);
            h.lr = lr_at(cfg, s);
            res.history.push_back(h);
            if (sink) sink(h);
        }
    }
    res.skipped_steps = res.optimizer.skipped;
    model.freeze_encoder();
    model.for_each_parameter([](Parameter<T>& p) { p.grad = Tensor<T>(); });
    res.model = std::move(model);
    res.final_eval.step = cfg.steps;
    res.final_eval.val_metric = res.history.back().metric;
    res.best = res.final_eval;  // the encoder kept is the last one
    return res;
}

// ----- downstream ----------------------------------------------------------

struct DownstreamData {
    const Dataset* train = nullptr;
    const Dataset* val = nullptr;
    const Dataset* test = nullptr;  // optional
};

/// Trains the downstream artefacts of `cfg.mode` on top of `model`:
///  probe   - head only, encoder frozen;
///  mask    - head and mask logits under L_C + lambda * L_S, encoder frozen;
///  ssf     - head and per-site scale/shift, encoder frozen;
///  scratch - every parameter of `model`, freshly initialised by the caller.
/// The head is re-initialised from cfg.seed for every mode.
template <class T>
TrainResult<T> run_downstream(Model<T> model, const DownstreamData& data, const TrainConfig& cfg,
                              const HistorySink& sink = {}) {
    cfg.validate();
    if (!data.train || !data.val) throw ConfigError("run_downstream: train and val splits are required");
    if (cfg.mode == Mode::pretrain) throw ConfigError("run_downstream: use run_pretrain for pretraining");
    if (cfg.mode != Mode::scratch && !model.encoder_frozen)
        throw ConfigError(std::string("run_downstream: ") + to_string(cfg.mode) + " mode needs a frozen encoder");
    const auto kind = cfg.loss_kind.value_or(default_loss(data.train->task));
    if (kind == LossKind::masked_mse) throw ConfigError("run_downstream: masked_mse is a pretraining loss");
    if (!model.spec.head) throw ConfigError("run_downstream: model spec has no head");

    TrainResult<T> res;
    reinit_head(model, cfg.seed);
    std::vector<Parameter<T>*> params;
    if (cfg.mode == Mode::scratch) {
        model.encoder_frozen = false;
        model.set_encoder_trainable(true);
        params = model.encoder_parameters();
    } else {
        model.set_encoder_trainable(false);
    }
    for (auto* p : model.head_parameters()) params.push_back(p);

    std::unique_ptr<SiteHook<T>> hook;
    if (cfg.mode == Mode::mask) {
        res.masks = make_mask_sites<T>(model.spec);
        for (auto& s : res.masks) params.push_back(&s.logits);
        hook = std::make_unique<LogitGateHook<T>>(res.masks);
    } else if (cfg.mode == Mode::ssf) {
        res.ssf = make_ssf_sites<T>(model.spec);
        for (auto& s : res.ssf) {
            s.gamma.trainable = s.beta.trainable = !cfg.freeze_modulation;
            if (s.gamma.trainable) params.push_back(&s.gamma);
            if (s.beta.trainable) params.push_back(&s.beta);
        }
        hook = std::make_unique<SsfHook<T>>(res.ssf);
    }

    const ModelSpec reference = model.spec;
    auto mask_eval_stats = [&](EvalSummary& e) {
        if (cfg.mode != Mode::mask) return;
        const auto st = mask_statistics(reference, res.masks);
        e.trim_ratio = st.trimming_ratio;
        e.active_fraction = st.active_fraction;
    };
    auto eval_split = [&](const Dataset& d) {
        if (cfg.mode == Mode::mask) {
            AssignmentHook<T> fixed(model.spec, materialize(res.masks));
            return evaluate(model, &fixed, d, cfg.eval_batch);
        }
        return evaluate(model, hook.get(), d, cfg.eval_batch);
    };

    LambdaSchedule lambda(cfg.sparsity.lambda);
    BatchStream stream(data.train->size(), cfg.batch_size, stream_seed(cfg.seed, kDataStream));
    bool have_best = false;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const auto idx = stream.next();
        detail::zero_grads(params);
        Tape<T> tape;
        auto x = tape.constant(data.train->batch_features(idx).template cast<T>());
        auto logits = forward_head(model, tape, forward_encoder(model, tape, x, hook.get()));
        const auto labels = kind == LossKind::cross_entropy ? data.train->batch_labels(idx) : std::vector<int>{};
        std::optional<Tensor<T>> tags;
        if (kind == LossKind::binary_cross_entropy) tags = data.train->batch_tags(idx).template cast<T>();
        auto lc = task_loss(logits, kind, labels, tags ? &*tags : nullptr);
        detail::require_finite_loss(lc, s);
        HistoryRecord h;
        Var<T> loss = lc;
        if (cfg.mode == Mode::mask) {
            auto ls = sparsity_loss(tape, res.masks, cfg.sparsity.t, cfg.sparsity.norm);
            const double lam = lambda.resolve(static_cast<double>(lc.value().item()), static_cast<double>(ls.value().item()));
            loss = total_objective(lc, ls, lam);
            h.sparsity_loss = static_cast<double>(ls.value().item());
            h.lambda = static_cast<double>(static_cast<T>(lam));
        }
        detail::require_finite_loss(loss, s);
        h.loss = static_cast<double>(loss.value().item());
        h.task_loss = static_cast<double>(lc.value().item());
        tape.backward(loss);
        h.lr = lr_at(cfg, s);
        if (!adam_step(params, res.optimizer, h.lr))
            res.diagnostics.push_back("step " + std::to_string(s) + ": non-finite gradient, update skipped");

        if ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps) {
            h.step = s + 1;
            EvalSummary e;
            e.step = s + 1;
            auto val = eval_split(*data.val);
            for (auto& d : val.diagnostics) res.diagnostics.push_back("eval step " + std::to_string(s + 1) + ": " + d);
            e.val_metric = h.metric = val.value;
            if (data.test) e.test_metric = eval_split(*data.test).value;
            mask_eval_stats(e);
            h.active_fraction = e.active_fraction;
            h.trim_ratio = e.trim_ratio;
            res.history.push_back(h);
            if (sink) sink(h);
            if (!have_best || e.val_metric >= res.best.val_metric) {
                have_best = true;
                res.best = e;
                if (cfg.mode == Mode::mask) res.best_masks = materialize(res.masks);
            }
            res.final_eval = e;
        }
    }
    res.skipped_steps = res.optimizer.skipped;
    model.for_each_parameter([](Parameter<T>& p) { p.grad = Tensor<T>(); });
    for (auto& s : res.masks) s.logits.grad = Tensor<T>();
    for (auto& s : res.ssf) s.gamma.grad = s.beta.grad = Tensor<T>();
    res.model = std::move(model);
    return res;
}

/// Fresh model of the trimmed spec for the scratch baseline.
template <class T>
Model<T> scratch_model(const TrimPlan& plan, std::uint64_t seed) {
    std::map<std::string, std::size_t> keep;
    for (const auto& [id, k] : plan.keep) keep[id] = k.size();
    return build_backbone<T>(derive_trimmed_spec(plan.source, keep), seed_mix({seed, 0x5C2A}));
}

}  // namespace trimlab
