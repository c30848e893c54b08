#include "spanocr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spanocr::ops {

namespace {

template <typename S>
using ImplPtr = std::shared_ptr<TensorImpl<S>>;

template <typename S>
bool needs_grad(const ImplPtr<S>& p) {
    return p && p->requires_grad;
}

void expect(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Dot product with four independent accumulators so the reduction vectorizes;
// the summation order is fixed and thread-count independent.
template <typename S>
S dot_unrolled(const S* __restrict__ a, const S* __restrict__ b, int64_t len) {
    S a0 = S(0), a1 = S(0), a2 = S(0), a3 = S(0);
    int64_t i = 0;
    for (; i + 4 <= len; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    S tail = S(0);
    for (; i < len; ++i) tail += a[i] * b[i];
    return ((a0 + a1) + (a2 + a3)) + tail;
}

template <typename S>
S dot_strided(const S* a, int64_t stride, const S* b, int64_t len) {
    S acc = S(0);
    for (int64_t i = 0; i < len; ++i) acc += a[i * stride] * b[i];
    return acc;
}

template <typename S>
void axpy(S wv, const S* __restrict__ a, S* __restrict__ o, int64_t len) {
    for (int64_t i = 0; i < len; ++i) o[i] += wv * a[i];
}

struct ConvDims {
    int64_t n, cin, ih, iw;
    int64_t cout, kh, kw;
    int64_t sh, sw, ph, pw;
    int64_t oh, ow;

    // Output rows for which input row iy = oy*sh - ph + k is in range.
    std::pair<int64_t, int64_t> oy_range(int64_t k) const {
        return out_range(k, ih, sh, ph, oh);
    }
    std::pair<int64_t, int64_t> ox_range(int64_t k) const {
        return out_range(k, iw, sw, pw, ow);
    }

private:
    static std::pair<int64_t, int64_t> out_range(int64_t k, int64_t extent, int64_t s, int64_t p,
                                                 int64_t out) {
        int64_t lo = p - k;  // need o*s >= lo
        int64_t o_lo = lo <= 0 ? 0 : (lo + s - 1) / s;
        int64_t hi = extent - 1 + p - k;  // need o*s <= hi
        if (hi < 0) return {1, 0};
        int64_t o_hi = std::min(out - 1, hi / s);
        return {o_lo, o_hi};
    }
};

template <typename S>
ConvDims conv_dims(const Tensor<S>& x, int64_t cout, int64_t kh, int64_t kw, Stride stride,
                   Padding padding) {
    ConvDims d{};
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.ih = x.dim(2);
    d.iw = x.dim(3);
    d.cout = cout;
    d.kh = kh;
    d.kw = kw;
    d.sh = stride.first;
    d.sw = stride.second;
    d.ph = padding.first;
    d.pw = padding.second;
    expect(kh >= 1 && kw >= 1, "conv2d: kernel extents must be >= 1");
    expect(d.sh >= 1 && d.sw >= 1, "conv2d: stride must be >= 1");
    expect(d.ih + 2 * d.ph >= kh && d.iw + 2 * d.pw >= kw,
           "conv2d: padded input " + std::to_string(d.ih + 2 * d.ph) + "x" +
               std::to_string(d.iw + 2 * d.pw) + " smaller than kernel " + std::to_string(kh) +
               "x" + std::to_string(kw));
    d.oh = conv_out_extent(d.ih, kh, d.sh, d.ph);
    d.ow = conv_out_extent(d.iw, kw, d.sw, d.pw);
    return d;
}

// Shared dense/depthwise kernels. For the depthwise case cin==1 per group and
// group g maps input channel g to output channel g.

template <typename S>
void conv_forward_plane(const S* in_n, const S* w_co, S bias, S* out_plane, const ConvDims& d,
                        int64_t cin_begin, int64_t cin_end, int64_t in_ch_stride) {
    std::fill(out_plane, out_plane + d.oh * d.ow, bias);
    for (int64_t ci = cin_begin; ci < cin_end; ++ci) {
        const S* in_c = in_n + ci * in_ch_stride;
        const S* w_c = w_co + (ci - cin_begin) * d.kh * d.kw;
        for (int64_t r = 0; r < d.kh; ++r) {
            auto [oy_lo, oy_hi] = d.oy_range(r);
            for (int64_t c = 0; c < d.kw; ++c) {
                S wv = w_c[r * d.kw + c];
                if (wv == S(0)) continue;
                auto [ox_lo, ox_hi] = d.ox_range(c);
                if (ox_lo > ox_hi) continue;
                int64_t len = ox_hi - ox_lo + 1;
                for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                    int64_t iy = oy * d.sh - d.ph + r;
                    const S* in_row = in_c + iy * d.iw + (ox_lo * d.sw - d.pw + c);
                    S* out_row = out_plane + oy * d.ow + ox_lo;
                    if (d.sw == 1) {
                        axpy(wv, in_row, out_row, len);
                    } else {
                        for (int64_t i = 0; i < len; ++i) out_row[i] += wv * in_row[i * d.sw];
                    }
                }
            }
        }
    }
}

// dX for one (n, ci) plane: sum over output channels and kernel taps.
template <typename S>
void conv_backward_input_plane(S* dx_c, const S* dy_n, const S* w, const ConvDims& d, int64_t ci,
                               int64_t co_begin, int64_t co_end, bool depthwise) {
    for (int64_t co = co_begin; co < co_end; ++co) {
        const S* dy_c = dy_n + co * d.oh * d.ow;
        const S* w_cc = depthwise ? w + ci * d.kh * d.kw
                                  : w + (co * d.cin + ci) * d.kh * d.kw;
        for (int64_t r = 0; r < d.kh; ++r) {
            auto [oy_lo, oy_hi] = d.oy_range(r);
            for (int64_t c = 0; c < d.kw; ++c) {
                S wv = w_cc[r * d.kw + c];
                if (wv == S(0)) continue;
                auto [ox_lo, ox_hi] = d.ox_range(c);
                if (ox_lo > ox_hi) continue;
                int64_t len = ox_hi - ox_lo + 1;
                for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                    int64_t iy = oy * d.sh - d.ph + r;
                    S* dx_row = dx_c + iy * d.iw + (ox_lo * d.sw - d.pw + c);
                    const S* dy_row = dy_c + oy * d.ow + ox_lo;
                    if (d.sw == 1) {
                        axpy(wv, dy_row, dx_row, len);
                    } else {
                        for (int64_t i = 0; i < len; ++i) dx_row[i * d.sw] += wv * dy_row[i];
                    }
                }
            }
        }
    }
}

// dW for one (co, ci) kernel slice. Walks output rows once and accumulates
// every kernel tap while the rows sit in cache; samples are summed in
// ascending order so the result does not depend on the thread partition.
// in_c0 / dy_c0 point at the (sample 0, ci) and (sample 0, co) planes.
template <typename S>
void conv_backward_weight_slice(S* dw_cc, const S* in_c0, int64_t in_stride, const S* dy_c0,
                                int64_t dy_stride, const ConvDims& d) {
    constexpr int64_t kMaxTaps = 32;
    int64_t taps = d.kh * d.kw;
    if (taps > kMaxTaps) {  // not hit by this project's kernels
        for (int64_t r = 0; r < d.kh; ++r) {
            auto [oy_lo, oy_hi] = d.oy_range(r);
            for (int64_t c = 0; c < d.kw; ++c) {
                auto [ox_lo, ox_hi] = d.ox_range(c);
                S acc = S(0);
                if (ox_lo <= ox_hi) {
                    int64_t len = ox_hi - ox_lo + 1;
                    for (int64_t n = 0; n < d.n; ++n) {
                        const S* in_c = in_c0 + n * in_stride;
                        const S* dy_c = dy_c0 + n * dy_stride;
                        for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            int64_t iy = oy * d.sh - d.ph + r;
                            const S* in_row = in_c + iy * d.iw + (ox_lo * d.sw - d.pw + c);
                            const S* dy_row = dy_c + oy * d.ow + ox_lo;
                            acc += d.sw == 1 ? dot_unrolled(in_row, dy_row, len)
                                             : dot_strided(in_row, d.sw, dy_row, len);
                        }
                    }
                }
                dw_cc[r * d.kw + c] += acc;
            }
        }
        return;
    }

    S acc[kMaxTaps] = {};
    int64_t ox_lo[kMaxTaps], ox_len[kMaxTaps];
    for (int64_t c = 0; c < d.kw; ++c) {
        auto [lo, hi] = d.ox_range(c);
        ox_lo[c] = lo;
        ox_len[c] = hi >= lo ? hi - lo + 1 : 0;
    }
    for (int64_t n = 0; n < d.n; ++n) {
        const S* in_c = in_c0 + n * in_stride;
        const S* dy_c = dy_c0 + n * dy_stride;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
            const S* dy_row = dy_c + oy * d.ow;
            for (int64_t r = 0; r < d.kh; ++r) {
                int64_t iy = oy * d.sh - d.ph + r;
                if (iy < 0 || iy >= d.ih) continue;
                const S* in_row = in_c + iy * d.iw;
                for (int64_t c = 0; c < d.kw; ++c) {
                    if (ox_len[c] == 0) continue;
                    const S* a = in_row + (ox_lo[c] * d.sw - d.pw + c);
                    const S* b = dy_row + ox_lo[c];
                    acc[r * d.kw + c] += d.sw == 1 ? dot_unrolled(a, b, ox_len[c])
                                                   : dot_strided(a, d.sw, b, ox_len[c]);
                }
            }
        }
    }
    for (int64_t k = 0; k < taps; ++k) dw_cc[k] += acc[k];
}

template <typename S>
void conv_backward_bias(S* db, const S* dy, const ConvDims& d) {
    for (int64_t co = 0; co < d.cout; ++co) {
        S acc = S(0);
        for (int64_t n = 0; n < d.n; ++n) {
            const S* dy_c = dy + (n * d.cout + co) * d.oh * d.ow;
            for (int64_t i = 0; i < d.oh * d.ow; ++i) acc += dy_c[i];
        }
        db[co] += acc;
    }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Stride stride, Padding padding) {
    expect(x.rank() == 4, "conv2d: input must be 4D, got " + shape_str(x.shape()));
    expect(weight.rank() == 4, "conv2d: weight must be 4D, got " + shape_str(weight.shape()));
    expect(x.dim(1) == weight.dim(1),
           "conv2d: input channels " + std::to_string(x.dim(1)) + " do not match weight cin " +
               std::to_string(weight.dim(1)));
    if (bias.defined())
        expect(bias.numel() == weight.dim(0), "conv2d: bias extent " + std::to_string(bias.numel()) +
                                                  " does not match cout " +
                                                  std::to_string(weight.dim(0)));
    ConvDims d = conv_dims(x, weight.dim(0), weight.dim(2), weight.dim(3), stride, padding);

    Tensor<S> out = Tensor<S>::zeros({d.n, d.cout, d.oh, d.ow});
    const S* in = x.data();
    const S* w = weight.data();
    const S* b = bias.defined() ? bias.data() : nullptr;
    S* o = out.data();
    parallel_for_samples(d.n * d.cout, [&](int64_t begin, int64_t end) {
        for (int64_t idx = begin; idx < end; ++idx) {
            int64_t n = idx / d.cout, co = idx % d.cout;
            conv_forward_plane(in + n * d.cin * d.ih * d.iw, w + co * d.cin * d.kh * d.kw,
                               b ? b[co] : S(0), o + idx * d.oh * d.ow, d, 0, d.cin, d.ih * d.iw);
        }
    });

    bool rg = x.requires_grad() || weight.requires_grad() ||
              (bias.defined() && bias.requires_grad());
    if (rg) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto wi = weight.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        auto oi = out.impl();
        out.impl()->parents = bi ? std::vector<ImplPtr<S>>{xi, wi, bi}
                                 : std::vector<ImplPtr<S>>{xi, wi};
        out.impl()->backward_fn = [xi, wi, bi, oi, d] {
            const S* dy = oi->grad.data();
            if (needs_grad(xi)) {
                xi->ensure_grad();
                S* dx = xi->grad.data();
                const S* w = wi->values.data();
                parallel_for_samples(d.n * d.cin, [&](int64_t begin, int64_t end) {
                    for (int64_t idx = begin; idx < end; ++idx) {
                        int64_t n = idx / d.cin, ci = idx % d.cin;
                        conv_backward_input_plane(dx + idx * d.ih * d.iw,
                                                  dy + n * d.cout * d.oh * d.ow, w, d, ci, 0,
                                                  d.cout, false);
                    }
                });
            }
            if (needs_grad(wi)) {
                wi->ensure_grad();
                S* dw = wi->grad.data();
                const S* in = xi->values.data();
                parallel_for_samples(d.cout * d.cin, [&](int64_t begin, int64_t end) {
                    for (int64_t idx = begin; idx < end; ++idx) {
                        int64_t co = idx / d.cin, ci = idx % d.cin;
                        conv_backward_weight_slice(dw + idx * d.kh * d.kw, in + ci * d.ih * d.iw,
                                                   d.cin * d.ih * d.iw, dy + co * d.oh * d.ow,
                                                   d.cout * d.oh * d.ow, d);
                    }
                });
            }
            if (bi && needs_grad(bi)) {
                bi->ensure_grad();
                conv_backward_bias(bi->grad.data(), dy, d);
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& weight, Stride stride,
                           Padding padding) {
    expect(x.rank() == 4, "depthwise_conv2d: input must be 4D, got " + shape_str(x.shape()));
    expect(weight.rank() == 4 && weight.dim(1) == 1,
           "depthwise_conv2d: weight must be [c,1,kh,kw], got " + shape_str(weight.shape()));
    expect(x.dim(1) == weight.dim(0),
           "depthwise_conv2d: input channels " + std::to_string(x.dim(1)) +
               " do not match weight channels " + std::to_string(weight.dim(0)));
    ConvDims d = conv_dims(x, x.dim(1), weight.dim(2), weight.dim(3), stride, padding);
    // Per-group view: one input channel feeds one output channel.
    ConvDims g = d;
    g.cin = 1;

    Tensor<S> out = Tensor<S>::zeros({d.n, d.cout, d.oh, d.ow});
    const S* in = x.data();
    const S* w = weight.data();
    S* o = out.data();
    parallel_for_samples(d.n * d.cout, [&](int64_t begin, int64_t end) {
        for (int64_t idx = begin; idx < end; ++idx) {
            int64_t n = idx / d.cout, c = idx % d.cout;
            conv_forward_plane(in + (n * d.cin + c) * d.ih * d.iw, w + c * d.kh * d.kw, S(0),
                               o + idx * d.oh * d.ow, g, 0, 1, d.ih * d.iw);
        }
    });

    if (x.requires_grad() || weight.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto wi = weight.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi, wi};
        out.impl()->backward_fn = [xi, wi, oi, d, g] {
            const S* dy = oi->grad.data();
            if (needs_grad(xi)) {
                xi->ensure_grad();
                S* dx = xi->grad.data();
                const S* w = wi->values.data();
                parallel_for_samples(d.n * d.cin, [&](int64_t begin, int64_t end) {
                    for (int64_t idx = begin; idx < end; ++idx) {
                        int64_t n = idx / d.cin, c = idx % d.cin;
                        conv_backward_input_plane(dx + idx * d.ih * d.iw,
                                                  dy + n * d.cout * d.oh * d.ow, w, g, c, c, c + 1,
                                                  true);
                    }
                });
            }
            if (needs_grad(wi)) {
                wi->ensure_grad();
                S* dw = wi->grad.data();
                const S* in = xi->values.data();
                parallel_for_samples(d.cout, [&](int64_t begin, int64_t end) {
                    for (int64_t c = begin; c < end; ++c)
                        conv_backward_weight_slice(dw + c * d.kh * d.kw, in + c * d.ih * d.iw,
                                                   d.cin * d.ih * d.iw, dy + c * d.oh * d.ow,
                                                   d.cout * d.oh * d.ow, d);
                });
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> depthwise_separable_conv(const Tensor<S>& x, const Tensor<S>& depthwise_weight,
                                   const Tensor<S>& pointwise_weight, const Tensor<S>& bias,
                                   Stride stride, Padding padding) {
    expect(pointwise_weight.rank() == 4 && pointwise_weight.dim(2) == 1 &&
               pointwise_weight.dim(3) == 1,
           "depthwise_separable_conv: pointwise weight must be [cout,c,1,1], got " +
               shape_str(pointwise_weight.shape()));
    Tensor<S> spatial = depthwise_conv2d(x, depthwise_weight, stride, padding);
    return conv2d(spatial, pointwise_weight, bias, {1, 1}, {0, 0});
}

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
    expect(x.rank() == 4, "instance_norm: input must be 4D, got " + shape_str(x.shape()));
    int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    expect(hw >= 1, "instance_norm: empty spatial extent");
    expect(gamma.numel() == c && beta.numel() == c,
           "instance_norm: affine extents " + std::to_string(gamma.numel()) + "/" +
               std::to_string(beta.numel()) + " do not match channels " + std::to_string(c));

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(n * c));
    auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(n * c));
    const S* in = x.data();
    const S* g = gamma.data();
    const S* b = beta.data();
    S* o = out.data();
    for (int64_t p = 0; p < n * c; ++p) {
        const S* xp = in + p * hw;
        S m = S(0);
        for (int64_t i = 0; i < hw; ++i) m += xp[i];
        m /= S(hw);
        S var = S(0);
        for (int64_t i = 0; i < hw; ++i) {
            S dv = xp[i] - m;
            var += dv * dv;
        }
        var /= S(hw);
        S is = S(1) / std::sqrt(var + eps);
        (*mean)[p] = m;
        (*invstd)[p] = is;
        S gc = g[p % c], bc = b[p % c];
        S* op = o + p * hw;
        for (int64_t i = 0; i < hw; ++i) op[i] = gc * (xp[i] - m) * is + bc;
    }

    if (x.requires_grad() || gamma.requires_grad() || beta.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi, gi, bi};
        out.impl()->backward_fn = [xi, gi, bi, oi, mean, invstd, n, c, hw] {
            const S* dy = oi->grad.data();
            const S* in = xi->values.data();
            const S* g = gi->values.data();
            bool dx_needed = needs_grad(xi);
            bool dg_needed = needs_grad(gi);
            bool db_needed = needs_grad(bi);
            if (dx_needed) xi->ensure_grad();
            if (dg_needed) gi->ensure_grad();
            if (db_needed) bi->ensure_grad();
            for (int64_t p = 0; p < n * c; ++p) {
                const S* xp = in + p * hw;
                const S* dyp = dy + p * hw;
                S m = (*mean)[p], is = (*invstd)[p];
                S sum_dy = S(0), sum_dy_xhat = S(0);
                for (int64_t i = 0; i < hw; ++i) {
                    S xhat = (xp[i] - m) * is;
                    sum_dy += dyp[i];
                    sum_dy_xhat += dyp[i] * xhat;
                }
                if (db_needed) bi->grad[p % c] += sum_dy;
                if (dg_needed) gi->grad[p % c] += sum_dy_xhat;
                if (dx_needed) {
                    S gc = g[p % c];
                    S* dxp = xi->grad.data() + p * hw;
                    S mean_dy = sum_dy / S(hw);
                    S mean_dy_xhat = sum_dy_xhat / S(hw);
                    for (int64_t i = 0; i < hw; ++i) {
                        S xhat = (xp[i] - m) * is;
                        dxp[i] += gc * is * (dyp[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* in = x.data();
    S* o = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] > S(0) ? in[i] : S(0);
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, n] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            const S* dy = oi->grad.data();
            const S* y = oi->values.data();
            S* dx = xi->grad.data();
            for (int64_t i = 0; i < n; ++i)
                if (y[i] > S(0)) dx[i] += dy[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    expect(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                       shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* o = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
    if (a.requires_grad() || b.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        out.impl()->parents = {ai, bi};
        out.impl()->backward_fn = [ai, bi, oi, n] {
            const S* dy = oi->grad.data();
            for (auto& pi : {ai, bi}) {
                if (!needs_grad(pi)) continue;
                pi->ensure_grad();
                S* dp = pi->grad.data();
                for (int64_t i = 0; i < n; ++i) dp[i] += dy[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* in = x.data();
    S* o = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] * factor;
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, n, factor] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            const S* dy = oi->grad.data();
            S* dx = xi->grad.data();
            for (int64_t i = 0; i < n; ++i) dx[i] += factor * dy[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    S acc = S(0);
    const S* in = x.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += in[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, n] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            S dy = oi->grad[0];
            S* dx = xi->grad.data();
            for (int64_t i = 0; i < n; ++i) dx[i] += dy;
        };
    }
    return out;
}

namespace {

template <typename S, bool Log>
Tensor<S> softmax_impl(const Tensor<S>& x) {
    expect(x.rank() >= 1, "softmax: scalar input");
    int64_t r = x.dim(x.rank() - 1);
    int64_t rows = x.numel() / r;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* in = x.data();
    S* o = out.data();
    for (int64_t row = 0; row < rows; ++row) {
        const S* xr = in + row * r;
        S* orow = o + row * r;
        S m = xr[0];
        for (int64_t i = 1; i < r; ++i) m = std::max(m, xr[i]);
        S total = S(0);
        for (int64_t i = 0; i < r; ++i) total += std::exp(xr[i] - m);
        if constexpr (Log) {
            S lse = m + std::log(total);
            for (int64_t i = 0; i < r; ++i) orow[i] = xr[i] - lse;
        } else {
            for (int64_t i = 0; i < r; ++i) orow[i] = std::exp(xr[i] - m) / total;
        }
    }
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, rows, r] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            const S* dy = oi->grad.data();
            const S* y = oi->values.data();
            S* dx = xi->grad.data();
            for (int64_t row = 0; row < rows; ++row) {
                const S* dyr = dy + row * r;
                const S* yr = y + row * r;
                S* dxr = dx + row * r;
                if constexpr (Log) {
                    S sum_dy = S(0);
                    for (int64_t i = 0; i < r; ++i) sum_dy += dyr[i];
                    for (int64_t i = 0; i < r; ++i) dxr[i] += dyr[i] - std::exp(yr[i]) * sum_dy;
                } else {
                    S dot = S(0);
                    for (int64_t i = 0; i < r; ++i) dot += dyr[i] * yr[i];
                    for (int64_t i = 0; i < r; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
                }
            }
        };
    }
    return out;
}

}  // namespace

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
    return softmax_impl<S, false>(x);
}

template <typename S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
    return softmax_impl<S, true>(x);
}

namespace {

template <typename S>
Tensor<S> dropout_impl(const Tensor<S>& x, double p, bool training, Rng& rng, bool per_channel) {
    expect(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;

    int64_t n = x.numel();
    auto mult = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
    S keep_scale = S(1.0 / (1.0 - p));
    if (per_channel) {
        expect(x.rank() == 4, "dropout_channel: input must be 4D, got " + shape_str(x.shape()));
        int64_t planes = x.dim(0) * x.dim(1);
        int64_t hw = x.dim(2) * x.dim(3);
        for (int64_t pl = 0; pl < planes; ++pl) {
            S v = rng.bernoulli(p) ? S(0) : keep_scale;
            std::fill(mult->begin() + pl * hw, mult->begin() + (pl + 1) * hw, v);
        }
    } else {
        for (int64_t i = 0; i < n; ++i) (*mult)[i] = rng.bernoulli(p) ? S(0) : keep_scale;
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* in = x.data();
    S* o = out.data();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] * (*mult)[i];
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, mult, n] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            const S* dy = oi->grad.data();
            S* dx = xi->grad.data();
            for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (*mult)[i];
        };
    }
    return out;
}

}  // namespace

template <typename S>
Tensor<S> dropout_elementwise(const Tensor<S>& x, double p, bool training, Rng& rng) {
    return dropout_impl(x, p, training, rng, false);
}

template <typename S>
Tensor<S> dropout_channel(const Tensor<S>& x, double p, bool training, Rng& rng) {
    return dropout_impl(x, p, training, rng, true);
}

template <typename S>
Tensor<S> adaptive_max_pool_vertical(const Tensor<S>& x) {
    expect(x.rank() == 4, "adaptive_max_pool_vertical: input must be 4D, got " +
                              shape_str(x.shape()));
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    expect(h >= 1, "adaptive_max_pool_vertical: empty vertical extent");
    Tensor<S> out = Tensor<S>::zeros({n, c, 1, w});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * w));
    const S* in = x.data();
    S* o = out.data();
    for (int64_t p = 0; p < n * c; ++p) {
        const S* xp = in + p * h * w;
        S* op = o + p * w;
        for (int64_t col = 0; col < w; ++col) {
            S best = xp[col];
            int64_t best_row = 0;
            for (int64_t row = 1; row < h; ++row) {
                S v = xp[row * w + col];
                if (v > best) {  // strict: ties keep the lowest row
                    best = v;
                    best_row = row;
                }
            }
            op[col] = best;
            (*argmax)[p * w + col] = best_row;
        }
    }
    if (x.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto xi = x.impl();
        auto oi = out.impl();
        out.impl()->parents = {xi};
        out.impl()->backward_fn = [xi, oi, argmax, n, c, h, w] {
            if (!needs_grad(xi)) return;
            xi->ensure_grad();
            const S* dy = oi->grad.data();
            S* dx = xi->grad.data();
            for (int64_t p = 0; p < n * c; ++p)
                for (int64_t col = 0; col < w; ++col)
                    dx[p * h * w + (*argmax)[p * w + col] * w + col] += dy[p * w + col];
        };
    }
    return out;
}

template <typename S>
Tensor<S> collapse_rows(const Tensor<S>& grid) {
    expect(grid.rank() == 4, "collapse_rows: grid must be 4D, got " + shape_str(grid.shape()));
    int64_t n = grid.dim(0), c = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
    int64_t t = h * w;
    Tensor<S> out = Tensor<S>::zeros({n, t, c});
    const S* in = grid.data();
    S* o = out.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t k = 0; k < c; ++k) {
            const S* plane = in + (b * c + k) * t;
            S* obk = o + b * t * c + k;
            for (int64_t i = 0; i < t; ++i) obk[i * c] = plane[i];
        }
    if (grid.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto gi = grid.impl();
        auto oi = out.impl();
        out.impl()->parents = {gi};
        out.impl()->backward_fn = [gi, oi, n, c, t] {
            if (!needs_grad(gi)) return;
            gi->ensure_grad();
            const S* dy = oi->grad.data();
            S* dg = gi->grad.data();
            for (int64_t b = 0; b < n; ++b)
                for (int64_t k = 0; k < c; ++k) {
                    S* plane = dg + (b * c + k) * t;
                    const S* dbk = dy + b * t * c + k;
                    for (int64_t i = 0; i < t; ++i) plane[i] += dbk[i * c];
                }
        };
    }
    return out;
}

template <typename S>
Tensor<S> uncollapse_rows(const Tensor<S>& flat, int64_t h, int64_t w) {
    expect(flat.rank() == 3, "uncollapse_rows: flat must be 3D, got " + shape_str(flat.shape()));
    expect(flat.dim(1) == h * w, "uncollapse_rows: sequence length " + std::to_string(flat.dim(1)) +
                                     " does not equal " + std::to_string(h) + "*" +
                                     std::to_string(w));
    int64_t n = flat.dim(0), c = flat.dim(2), t = h * w;
    Tensor<S> out = Tensor<S>::zeros({n, c, h, w});
    const S* in = flat.data();
    S* o = out.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t k = 0; k < c; ++k) {
            S* plane = o + (b * c + k) * t;
            const S* ibk = in + b * t * c + k;
            for (int64_t i = 0; i < t; ++i) plane[i] = ibk[i * c];
        }
    if (flat.requires_grad()) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto fi = flat.impl();
        auto oi = out.impl();
        out.impl()->parents = {fi};
        out.impl()->backward_fn = [fi, oi, n, c, t] {
            if (!needs_grad(fi)) return;
            fi->ensure_grad();
            const S* dy = oi->grad.data();
            S* df = fi->grad.data();
            for (int64_t b = 0; b < n; ++b)
                for (int64_t k = 0; k < c; ++k) {
                    const S* plane = dy + (b * c + k) * t;
                    S* dbk = df + b * t * c + k;
                    for (int64_t i = 0; i < t; ++i) dbk[i * c] += plane[i];
                }
        };
    }
    return out;
}

#define SPANOCR_INSTANTIATE_OPS(S)                                                              \
    template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Stride,    \
                              Padding);                                                         \
    template Tensor<S> depthwise_conv2d(const Tensor<S>&, const Tensor<S>&, Stride, Padding);  \
    template Tensor<S> depthwise_separable_conv(const Tensor<S>&, const Tensor<S>&,            \
                                                const Tensor<S>&, const Tensor<S>&, Stride,    \
                                                Padding);                                       \
    template Tensor<S> instance_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S); \
    template Tensor<S> relu(const Tensor<S>&);                                                  \
    template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                 \
    template Tensor<S> scale(const Tensor<S>&, S);                                              \
    template Tensor<S> sum(const Tensor<S>&);                                                   \
    template Tensor<S> softmax_lastdim(const Tensor<S>&);                                       \
    template Tensor<S> log_softmax_lastdim(const Tensor<S>&);                                   \
    template Tensor<S> dropout_elementwise(const Tensor<S>&, double, bool, Rng&);               \
    template Tensor<S> dropout_channel(const Tensor<S>&, double, bool, Rng&);                   \
    template Tensor<S> adaptive_max_pool_vertical(const Tensor<S>&);                            \
    template Tensor<S> collapse_rows(const Tensor<S>&);                                         \
    template Tensor<S> uncollapse_rows(const Tensor<S>&, int64_t, int64_t);

SPANOCR_INSTANTIATE_OPS(float)
SPANOCR_INSTANTIATE_OPS(double)

#undef SPANOCR_INSTANTIATE_OPS

}  // namespace spanocr::ops
