#pragma once

#include <utility>

#include "spanocr/rng.hpp"
#include "spanocr/tensor.hpp"

namespace spanocr::ops {

using Stride = std::pair<int64_t, int64_t>;   // (vertical, horizontal)
using Padding = std::pair<int64_t, int64_t>;  // (vertical, horizontal)

// All image-like tensors use the batch x channels x height x width layout.

// Dense 2D convolution. weight is [cout, cin, kh, kw], bias is [cout] (may be
// an undefined Tensor to skip). Output extent e' = floor((e + 2p - k)/s) + 1.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Stride stride = {1, 1}, Padding padding = {0, 0});

// Per-channel convolution with channel multiplier 1; weight is [c, 1, kh, kw].
template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& weight,
                           Stride stride = {1, 1}, Padding padding = {0, 0});

// Depthwise 3x3 stage followed by a pointwise 1x1 stage; bias applies after
// the pointwise mix. Parameter cost c*kh*kw + cout*c + cout.
template <typename S>
Tensor<S> depthwise_separable_conv(const Tensor<S>& x, const Tensor<S>& depthwise_weight,
                                   const Tensor<S>& pointwise_weight, const Tensor<S>& bias,
                                   Stride stride = {1, 1}, Padding padding = {0, 0});

// Per-sample, per-channel standardization over the spatial extent, then the
// per-channel affine gamma/beta.
template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                        S eps = S(1e-5));

template <typename S>
Tensor<S> relu(const Tensor<S>& x);

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor);

template <typename S>
Tensor<S> sum(const Tensor<S>& x);

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x);

template <typename S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x);

// Bernoulli(1-p) keep mask per element / per channel, survivors scaled by
// 1/(1-p); identity when training is false.
template <typename S>
Tensor<S> dropout_elementwise(const Tensor<S>& x, double p, bool training, Rng& rng);

template <typename S>
Tensor<S> dropout_channel(const Tensor<S>& x, double p, bool training, Rng& rng);

// [n,c,h,w] -> [n,c,1,w], max over the vertical axis. Ties route the gradient
// to the lowest row index.
template <typename S>
Tensor<S> adaptive_max_pool_vertical(const Tensor<S>& x);

// [n,c,h,w] -> [n,h*w,c]; pure re-indexing, row-major with the top grid row
// first. uncollapse_rows is its exact inverse.
template <typename S>
Tensor<S> collapse_rows(const Tensor<S>& grid);

template <typename S>
Tensor<S> uncollapse_rows(const Tensor<S>& flat, int64_t h, int64_t w);

inline int64_t conv_out_extent(int64_t e, int64_t k, int64_t s, int64_t p) {
    return (e + 2 * p - k) / s + 1;
}

}  // namespace spanocr::ops
