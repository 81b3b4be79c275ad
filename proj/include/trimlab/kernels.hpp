#pragma once

// Dense arithmetic kernels. GEMMs go through Eigen maps over row-major
// buffers; everything that multiplies and accumulates reports its MAC count.

#include <algorithm>
#include <Eigen/Core>

#include <cstddef>
#include <cstdint>

#include "trimlab/core.hpp"

namespace trimlab::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

enum class Trans { no, yes };

/// C (m x n) = op(A) * op(B), or C += ... when `accumulate`.
/// op(A) is m x k and op(B) is k x n; buffers are row-major as stored.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, Trans ta, Trans tb,
          bool accumulate) {
    record_macs(static_cast<std::uint64_t>(m) * k * n);
    MapMat<T> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate) C.setZero();
        return;
    }
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    auto run = [&](const auto& A, const auto& B) {
        if (accumulate)
            C.noalias() += A * B;
        else
            C.noalias() = A * B;
    };
    if (ta == Trans::no && tb == Trans::no)
        run(CMapMat<T>(a, M, K), CMapMat<T>(b, K, N));
    else if (ta == Trans::no && tb == Trans::yes)
        run(CMapMat<T>(a, M, K), CMapMat<T>(b, N, K).transpose());
    else if (ta == Trans::yes && tb == Trans::no)
        run(CMapMat<T>(a, K, M).transpose(), CMapMat<T>(b, K, N));
    else
        run(CMapMat<T>(a, K, M).transpose(), CMapMat<T>(b, N, K).transpose());
}

inline std::size_t conv_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const std::size_t padded = len + 2 * padding;
    if (padded < kernel || stride == 0) return 0;
    return (padded - kernel) / stride + 1;
}

/// Channels-last im2col: rows are (batch, out position), columns (tap, in channel),
/// so each tap is one contiguous copy of an input frame.
template <class T>
void im2col(const T* x, T* col, std::size_t batch, std::size_t len, std::size_t cin, std::size_t kernel,
            std::size_t stride, std::size_t padding, std::size_t out_len) {
    const std::size_t width = cin * kernel;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < out_len; ++t) {
            T* row = col + (b * out_len + t) * width;
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(padding);
                if (src >= 0 && src < static_cast<std::ptrdiff_t>(len))
                    std::copy_n(x + (b * len + static_cast<std::size_t>(src)) * cin, cin, row + k * cin);
                else
                    std::fill_n(row + k * cin, cin, T(0));
            }
        }
}

template <class T>
void col2im_add(const T* col, T* dx, std::size_t batch, std::size_t len, std::size_t cin, std::size_t kernel,
                std::size_t stride, std::size_t padding, std::size_t out_len) {
    const std::size_t width = cin * kernel;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < out_len; ++t) {
            const T* row = col + (b * out_len + t) * width;
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(padding);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                T* xs = dx + (b * len + static_cast<std::size_t>(src)) * cin;
                const T* rs = row + k * cin;
                for (std::size_t ci = 0; ci < cin; ++ci) xs[ci] += rs[ci];
            }
        }
}

/// (out, in, tap) weight to (out, tap, in), matching the im2col column order.
template <class T>
void taps_inner_to_outer(const T* w, T* wp, std::size_t cout, std::size_t cin, std::size_t kernel) {
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t k = 0; k < kernel; ++k) wp[(o * kernel + k) * cin + ci] = w[(o * cin + ci) * kernel + k];
}

/// Depthwise stride-1 convolution over channels-last input. `wt` is the
/// weight transposed to (tap, channel). Every tap counts as a MAC, padded or not.
template <class T>
void depthwise(const T* x, const T* wt, T* y, std::size_t batch, std::size_t len, std::size_t channels,
               std::size_t kernel, std::size_t padding) {
    record_macs(static_cast<std::uint64_t>(batch) * len * channels * kernel);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) {
            T* out = y + (b * len + t) * channels;
            for (std::size_t c = 0; c < channels; ++c) out[c] = T(0);
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                const T* in = x + (b * len + static_cast<std::size_t>(src)) * channels;
                const T* w = wt + k * channels;
                for (std::size_t c = 0; c < channels; ++c) out[c] += w[c] * in[c];
            }
        }
}

}  // namespace trimlab::kernels
