#pragma once

// Central finite-difference oracle for reverse-mode gradients. Test-only: it
// touches nothing but forward evaluation, so it stays independent of the
// backward closures it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "trimlab/autograd.hpp"

namespace trimlab::oracle {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
    double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double numeric_norm = 0;
};

/// Scalarises f's output with fixed random weights and compares every input's
/// analytic gradient against (f(x+h) - f(x-h)) / 2h.
inline GradCheck gradcheck(const Fn& f, const std::vector<Tensor<double>>& inputs, Rng& rng, double h = 1e-5) {
    Tensor<double> weights;
    bool drawn = false;
    auto scalarise = [&](Tape<double>& tape, const Var<double>& out) {
        if (!drawn) {
            drawn = true;
            weights = Tensor<double>(out.shape());
            for (auto& w : weights.values()) w = rng.uniform(-1.0, 1.0);
        }
        return sum(mul(out, tape.constant(weights)));
    };
    auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var<double>> vs;
        for (const auto& x : xs) vs.push_back(tape.constant(x));
        return scalarise(tape, f(tape, vs)).value().item();
    };

    Tape<double> tape;
    std::vector<Var<double>> vs;
    for (const auto& x : inputs) vs.push_back(tape.leaf(x, true));
    auto loss = scalarise(tape, f(tape, vs));
    tape.backward(loss);

    double diff2 = 0, an2 = 0, nu2 = 0;
    auto xs = inputs;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const auto& g = tape.grad(vs[k]);
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            const double orig = xs[k][i];
            xs[k][i] = orig + h;
            const double up = evaluate(xs);
            xs[k][i] = orig - h;
            const double down = evaluate(xs);
            xs[k][i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double analytic = g.size() ? g[i] : 0.0;
            diff2 += (analytic - numeric) * (analytic - numeric);
            an2 += analytic * analytic;
            nu2 += numeric * numeric;
        }
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-12});
    return {std::sqrt(diff2) / denom, std::sqrt(nu2)};
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace trimlab::oracle
