#pragma once

// Cost accounting: closed-form MAC counts from a spec, the kernel-level
// counter they are checked against, and a forward-latency harness.
//
// Convention: one MAC per scalar multiply-accumulate inside a matrix product,
// convolution or depthwise convolution; FLOPs = 2 * MACs. Bias additions,
// normalisation, activations, softmax and pooling are not counted.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "trimlab/nn.hpp"

namespace trimlab {

inline std::uint64_t linear_macs(std::size_t in, std::size_t out, std::size_t positions) {
    return static_cast<std::uint64_t>(in) * out * positions;
}

inline std::uint64_t conv1d_macs(std::size_t in, std::size_t out, std::size_t kernel, std::size_t out_len) {
    return static_cast<std::uint64_t>(out) * in * kernel * out_len;
}

inline std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (len + 2 * padding < kernel) return 0;
    return (len + 2 * padding - kernel) / stride + 1;
}

/// Projections (q, k, v, o) plus scores and the weighted sum, for `heads`
/// surviving heads of width d_head over `len` positions.
inline std::uint64_t attention_macs(std::size_t d_model, std::size_t heads, std::size_t d_head, std::size_t len) {
    const std::size_t inner = heads * d_head;
    const std::uint64_t proj = 4 * linear_macs(d_model, inner, len);
    const std::uint64_t mix = 2 * static_cast<std::uint64_t>(heads) * len * len * d_head;
    return proj + mix;
}

struct TimingReport {
    double median_ms = 0;
    double min_ms = 0;
    double p90_ms = 0;
    std::size_t reps = 0;
    std::size_t discarded = 0;  // warmup runs
};

struct CostReport {
    std::size_t params = 0;  // encoder + head
    std::size_t encoder_params = 0;
    std::uint64_t macs = 0;
    std::uint64_t flops = 0;
    std::optional<std::uint64_t> bytes;
    std::optional<TimingReport> timing;
    std::optional<double> speedup;
};

/// Closed-form cost of one forward pass on a single example of `input_shape`,
/// given as (frames, features) or (1, frames, features).
inline CostReport count_costs(const ModelSpec& spec, const Shape& input_shape) {
    Shape s = input_shape;
    if (s.size() == 3) {
        if (s[0] != 1) throw ShapeError("count_costs", s, Shape{1, 0, spec.input_dim}, "costs are per single example");
        s.erase(s.begin());
    }
    if (s.size() != 2 || s[1] != spec.input_dim || s[0] == 0)
        throw ShapeError("count_costs", input_shape, Shape{0, spec.input_dim}, "expected (frames, features)");
    const std::size_t T = s[0];
    std::uint64_t macs = 0;
    if (spec.backbone == Backbone::conv_t) {
        std::size_t len = T, in = spec.input_dim;
        for (auto out : spec.conv_channels) {
            len = conv1d_out_len(len, spec.conv_kernel, spec.conv_stride, spec.conv_padding);
            macs += conv1d_macs(in, out, spec.conv_kernel, len);
            in = out;
        }
    } else {
        const std::size_t D = spec.d_model;
        macs += linear_macs(spec.input_dim, D, T);
        for (const auto& l : spec.layers) {
            macs += attention_macs(D, l.heads, spec.d_head, T);
            if (spec.backbone == Backbone::conformer_t) {
                macs += linear_macs(D, l.conv_channels, T);
                macs += static_cast<std::uint64_t>(T) * l.conv_channels * spec.depthwise_kernel;
                macs += linear_macs(l.conv_channels, D, T);
            }
            macs += linear_macs(D, l.ffn_hidden, T) + linear_macs(l.ffn_hidden, D, T);
        }
    }
    if (spec.head) macs += linear_macs(spec.embedding_dim(), spec.head->hidden, 1) + linear_macs(spec.head->hidden, spec.head->outputs, 1);
    const auto pc = count_params(spec);
    CostReport r;
    r.params = pc.total();
    r.encoder_params = pc.encoder;
    r.macs = macs;
    r.flops = 2 * macs;
    return r;
}

/// MACs actually executed by the arithmetic kernels during one inference pass.
template <class T>
std::uint64_t instrumented_macs(const Model<T>& model, const Tensor<T>& input) {
    MacCounterScope scope;
    (void)infer(model, input);
    return scope.count();
}

namespace detail {

inline TimingReport summarise_timings(std::vector<double> ms, std::size_t warmup) {
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    TimingReport r;
    r.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    r.min_ms = ms.front();
    r.p90_ms = ms[std::min(n - 1, static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n))) - 1)];
    r.reps = n;
    r.discarded = warmup;
    return r;
}

template <class T>
double time_once(const Model<T>& m, const Tensor<T>& input) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)infer(m, input);
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Wall-clock latency of single-example inference: `warmup` discarded runs,
/// then `reps` timed runs on a monotonic clock.
template <class T>
TimingReport time_forward(const Model<T>& model, const Tensor<T>& input, std::size_t warmup = 10, std::size_t reps = 30) {
    if (reps < 3) throw ConfigError("time_forward: reps must be at least 3");
    for (std::size_t i = 0; i < warmup; ++i) (void)infer(model, input);
    std::vector<double> ms;
    for (std::size_t i = 0; i < reps; ++i) ms.push_back(detail::time_once(model, input));
    return detail::summarise_timings(std::move(ms), warmup);
}

/// Interleaves base and trimmed timings in rounds so slow drift in machine
/// load affects both alike; returns the pair of reports.
template <class T>
std::pair<TimingReport, TimingReport> time_pair(const Model<T>& base, const Model<T>& trimmed, const Tensor<T>& input,
                                                std::size_t warmup = 10, std::size_t reps = 30) {
    if (reps < 3) throw ConfigError("time_forward: reps must be at least 3");
    std::vector<double> a, b;
    for (std::size_t i = 0; i < warmup; ++i) {
        detail::time_once(base, input);
        detail::time_once(trimmed, input);
    }
    for (std::size_t i = 0; i < reps; ++i) {
        a.push_back(detail::time_once(base, input));
        b.push_back(detail::time_once(trimmed, input));
    }
    return {detail::summarise_timings(std::move(a), warmup), detail::summarise_timings(std::move(b), warmup)};
}

inline double speedup(const TimingReport& base, const TimingReport& trimmed) {
    if (!(trimmed.median_ms > 0)) throw NumericError("speedup", "trimmed median latency is zero");
    return base.median_ms / trimmed.median_ms;
}

/// "name, 344.2 Mo, 23.3 GFLOPs, 11.6 GMACs" with an optional trailing
/// speedup column. Mo is 1e6 bytes.
inline std::string comparison_row(const std::string& name, double bytes, double flops, double macs,
                                  std::optional<double> speed = std::nullopt) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s, %.1f Mo, %.1f GFLOPs, %.1f GMACs", name.c_str(), bytes / 1e6, flops / 1e9, macs / 1e9);
    std::string s = buf;
    if (speed) {
        std::snprintf(buf, sizeof buf, ", x%.2f", *speed);
        s += buf;
    }
    return s;
}

inline std::string comparison_row(const std::string& name, const CostReport& r) {
    return comparison_row(name, static_cast<double>(r.bytes.value_or(0)), static_cast<double>(r.flops),
                          static_cast<double>(r.macs), r.speedup);
}

}  // namespace trimlab
