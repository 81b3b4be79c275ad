#pragma once

// Trainable binary gates over maskable sites and the sparsity-inducing loss.
//
// Forward gate: round(sigmoid(m)) with ties rounding up, i.e. a unit is active
// iff its logit m >= 0. Backward: straight-through at the rounding step, so the
// logit gradient is upstream * feature * sigmoid'(m).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trimlab/autograd.hpp"
#include "trimlab/nn.hpp"

namespace trimlab {

/// Materialised gates: site id -> one 0/1 entry per unit.
using MaskAssignment = std::map<std::string, std::vector<std::uint8_t>>;

constexpr double kMaskInitLogit = 3.0;

template <class T>
struct MaskSite {
    std::string site_id;
    SiteKind kind;
    Parameter<T> logits;

    std::size_t unit_count() const { return logits.value.size(); }
};

template <class T>
std::vector<MaskSite<T>> make_mask_sites(const ModelSpec& spec, double init = kMaskInitLogit) {
    std::vector<MaskSite<T>> out;
    for (const auto& s : spec.sites())
        out.push_back({s.id, s.kind, Parameter<T>{"mask." + s.id, Tensor<T>(Shape{s.unit_count}, static_cast<T>(init)), {}, true}});
    return out;
}

enum class SparsityNorm { per_site, per_unit };

struct SparsityConfig {
    double t = 0.5;
    std::optional<double> lambda;  // empty = "auto"
    SparsityNorm norm = SparsityNorm::per_site;

    void validate() const {
        if (!std::isfinite(t)) throw ConfigError("sparsity.t must be finite");
        if (lambda && (!std::isfinite(*lambda) || *lambda < 0)) throw ConfigError("sparsity.lambda must be >= 0 or \"auto\"");
    }
};

template <class T>
MaskAssignment materialize(const std::vector<MaskSite<T>>& sites) {
    MaskAssignment a;
    for (const auto& s : sites) {
        auto& g = a[s.site_id];
        for (T m : s.logits.value.values()) g.push_back(m >= T(0) ? 1 : 0);
    }
    return a;
}

inline MaskAssignment all_active(const ModelSpec& spec) {
    MaskAssignment a;
    for (const auto& s : spec.sites()) a[s.id].assign(s.unit_count, 1);
    return a;
}

/// Throws PlanError unless `masks` has exactly one binary vector of the right
/// length per site of `spec`.
inline void validate_assignment(const ModelSpec& spec, const MaskAssignment& masks) {
    const auto sites = spec.sites();
    for (const auto& s : sites) {
        auto it = masks.find(s.id);
        if (it == masks.end()) throw PlanError("mask assignment is missing site " + s.id);
        if (it->second.size() != s.unit_count)
            throw PlanError("site " + s.id + ": mask has " + std::to_string(it->second.size()) + " entries, site has " +
                            std::to_string(s.unit_count) + " units");
        for (auto v : it->second)
            if (v > 1) throw PlanError("site " + s.id + ": mask values must be 0 or 1");
    }
    for (const auto& [id, _] : masks) {
        bool known = false;
        for (const auto& s : sites) known = known || s.id == id;
        if (!known) throw PlanError("mask assignment names unknown site " + id);
    }
}

/// features * ste_round(sigmoid(logits)) along `axis`.
template <class T>
Var<T> gate(const Var<T>& logits, const Var<T>& features, std::size_t axis) {
    return mul_axis(features, ste_round(sigmoid(logits)), axis);
}

/// Gates driven by trainable logits. Each apply() binds the site's logits on
/// the tape, so gradients land in MaskSite::logits.grad.
template <class T>
class LogitGateHook : public SiteHook<T> {
   public:
    explicit LogitGateHook(const std::vector<MaskSite<T>>& sites) : sites_(sites) {}

    Var<T> apply(Tape<T>& tape, const MaskableSite& site, const Var<T>& x, std::size_t axis) override {
        for (const auto& s : sites_)
            if (s.site_id == site.id) return gate(tape.param(s.logits), x, axis);
        throw PlanError("no mask logits for site " + site.id);
    }

   private:
    const std::vector<MaskSite<T>>& sites_;
};

/// Fixed binary gates.
template <class T>
class AssignmentHook : public SiteHook<T> {
   public:
    AssignmentHook(const ModelSpec& spec, const MaskAssignment& masks) {
        validate_assignment(spec, masks);
        for (const auto& [id, g] : masks) {
            Tensor<T> v(Shape{g.size()});
            for (std::size_t i = 0; i < g.size(); ++i) v[i] = g[i] ? T(1) : T(0);
            gates_.emplace(id, std::move(v));
        }
    }

    Var<T> apply(Tape<T>& tape, const MaskableSite& site, const Var<T>& x, std::size_t axis) override {
        return mul_axis(x, tape.constant(gates_.at(site.id)), axis);
    }

   private:
    std::map<std::string, Tensor<T>> gates_;
};

/// Embedding and logits of a model under fixed masks.
template <class T>
ForwardResult<T> infer_masked(const Model<T>& model, const Tensor<T>& features, const MaskAssignment& masks) {
    AssignmentHook<T> hook(model.spec, masks);
    return infer(model, features, &hook);
}

/// (1/N) * sum over sites of ||sigmoid(m_site - t)||_2, N the total unit count.
/// The per_unit variant replaces each site norm by the sum of its entries'
/// absolute values.
template <class T>
Var<T> sparsity_loss(Tape<T>& tape, const std::vector<MaskSite<T>>& sites, double t,
                     SparsityNorm norm = SparsityNorm::per_site) {
    if (sites.empty()) throw ConfigError("sparsity_loss: no mask sites");
    std::size_t n = 0;
    for (const auto& s : sites) n += s.unit_count();
    if (n == 0) throw ConfigError("sparsity_loss: sites have no units");
    std::optional<Var<T>> total;
    for (const auto& s : sites) {
        auto shifted = sigmoid(add_scalar(tape.param(s.logits), static_cast<T>(-t)));
        // sigmoid output is positive, so |.| summed is a plain sum
        auto term = norm == SparsityNorm::per_site ? l2norm(shifted) : sum(shifted);
        total = total ? add(*total, term) : term;
    }
    return scale(*total, T(1) / static_cast<T>(n));
}

/// Sparsity weight; "auto" freezes L_C / L_S from the first call.
class LambdaSchedule {
   public:
    explicit LambdaSchedule(std::optional<double> fixed) : fixed_(fixed) {}

    double resolve(double task_loss, double sparsity) {
        if (fixed_) return *fixed_;
        if (!resolved_) {
            if (!(sparsity > 0) || !std::isfinite(task_loss)) throw NumericError("lambda auto", "L_S or L_C unusable");
            frozen_ = task_loss / sparsity;
            resolved_ = true;
        }
        return frozen_;
    }

    std::optional<double> value() const {
        if (fixed_) return fixed_;
        if (resolved_) return frozen_;
        return std::nullopt;
    }

   private:
    std::optional<double> fixed_;
    bool resolved_ = false;
    double frozen_ = 0.0;
};

/// L = L_C + lambda * L_S.
template <class T>
Var<T> total_objective(const Var<T>& task_loss, const Var<T>& sparsity, double lambda) {
    if (!std::isfinite(task_loss.value().item()) || !std::isfinite(sparsity.value().item()) || !std::isfinite(lambda))
        throw NumericError("total_objective", "non-finite input");
    if (lambda == 0.0) return task_loss;
    return add(task_loss, scale(sparsity, static_cast<T>(lambda)));
}

struct SiteStats {
    std::string site_id;
    std::size_t units = 0;
    std::size_t active = 0;
};

struct MaskStats {
    std::vector<SiteStats> sites;
    std::size_t total_units = 0;
    std::size_t active_units = 0;
    double active_fraction = 1.0;
    std::size_t params_before = 0;  // encoder only
    std::size_t params_after = 0;
    double trimming_ratio = 0.0;
};

inline std::map<std::string, std::size_t> keep_counts(const MaskAssignment& masks) {
    std::map<std::string, std::size_t> keep;
    for (const auto& [id, g] : masks) {
        std::size_t n = 0;
        for (auto v : g) n += v;
        keep[id] = n;
    }
    return keep;
}

/// Active-unit summary and the parameter-level trimming ratio the masks imply.
inline MaskStats mask_statistics(const ModelSpec& spec, const MaskAssignment& masks) {
    validate_assignment(spec, masks);
    MaskStats st;
    for (const auto& s : spec.sites()) {
        SiteStats ss{s.id, s.unit_count, 0};
        for (auto v : masks.at(s.id)) ss.active += v;
        st.total_units += ss.units;
        st.active_units += ss.active;
        st.sites.push_back(ss);
    }
    st.active_fraction = st.total_units ? static_cast<double>(st.active_units) / static_cast<double>(st.total_units) : 1.0;
    st.params_before = count_params(spec).encoder;
    st.params_after = count_params(derive_trimmed_spec(spec, keep_counts(masks))).encoder;
    st.trimming_ratio =
        st.params_before ? 1.0 - static_cast<double>(st.params_after) / static_cast<double>(st.params_before) : 0.0;
    return st;
}

template <class T>
MaskStats mask_statistics(const ModelSpec& spec, const std::vector<MaskSite<T>>& sites) {
    return mask_statistics(spec, materialize(sites));
}

}  // namespace trimlab
