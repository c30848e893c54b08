#include "spanocr/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace spanocr {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double logsumexp2(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double logsumexp3(double a, double b, double c) { return logsumexp2(logsumexp2(a, b), c); }

}  // namespace

int64_t ctc_min_frames(const std::vector<int>& label) {
    int64_t frames = static_cast<int64_t>(label.size());
    for (size_t i = 1; i < label.size(); ++i)
        if (label[i] == label[i - 1]) ++frames;
    return frames;
}

CtcResult ctc_forward_backward(const double* log_probs, int64_t t_len, int64_t num_classes,
                               const std::vector<int>& label) {
    if (t_len < 1) throw std::invalid_argument("ctc: sequence length must be >= 1");
    int blank = static_cast<int>(num_classes) - 1;
    for (int idx : label)
        if (idx < 0 || idx >= blank)
            throw std::invalid_argument("ctc: label index " + std::to_string(idx) +
                                        " outside charset of size " + std::to_string(blank));

    CtcResult res;
    if (ctc_min_frames(label) > t_len) {
        res.feasible = false;
        res.loss = std::numeric_limits<double>::infinity();
        return res;
    }

    // Blank-interleaved extended label: - a - b - ... -
    int64_t L = static_cast<int64_t>(label.size());
    int64_t S = 2 * L + 1;
    std::vector<int> ext(static_cast<size_t>(S));
    for (int64_t s = 0; s < S; ++s) ext[s] = (s % 2 == 1) ? label[s / 2] : blank;

    auto lp = [&](int64_t t, int cls) { return log_probs[t * num_classes + cls]; };
    auto allow_skip = [&](int64_t s) {
        return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    };

    // alpha[t][s]: log prob of prefixes ending in state s at time t (emission
    // at t included).
    std::vector<double> alpha(static_cast<size_t>(t_len * S), kNegInf);
    alpha[0] = lp(0, ext[0]);
    if (S > 1) alpha[1] = lp(0, ext[1]);
    for (int64_t t = 1; t < t_len; ++t) {
        for (int64_t s = 0; s < S; ++s) {
            double best = alpha[(t - 1) * S + s];
            if (s >= 1) best = logsumexp2(best, alpha[(t - 1) * S + s - 1]);
            if (allow_skip(s)) best = logsumexp2(best, alpha[(t - 1) * S + s - 2]);
            alpha[t * S + s] = best == kNegInf ? kNegInf : best + lp(t, ext[s]);
        }
    }

    double log_p = logsumexp2(alpha[(t_len - 1) * S + S - 1],
                              S > 1 ? alpha[(t_len - 1) * S + S - 2] : kNegInf);
    if (!std::isfinite(log_p)) {
        res.feasible = false;
        res.loss = std::numeric_limits<double>::infinity();
        return res;
    }
    res.loss = -log_p;

    // beta[t][s]: log prob of completing from state s after time t (emission
    // at t excluded), so alpha + beta counts each frame once.
    std::vector<double> beta(static_cast<size_t>(t_len * S), kNegInf);
    beta[(t_len - 1) * S + S - 1] = 0.0;
    if (S > 1) beta[(t_len - 1) * S + S - 2] = 0.0;
    for (int64_t t = t_len - 2; t >= 0; --t) {
        for (int64_t s = 0; s < S; ++s) {
            double acc = beta[(t + 1) * S + s] + lp(t + 1, ext[s]);
            if (s + 1 < S) acc = logsumexp2(acc, beta[(t + 1) * S + s + 1] + lp(t + 1, ext[s + 1]));
            if (s + 2 < S && allow_skip(s + 2))
                acc = logsumexp2(acc, beta[(t + 1) * S + s + 2] + lp(t + 1, ext[s + 2]));
            beta[t * S + s] = acc;
        }
    }

    // d loss / d log p[t][k] = -sum over states labelled k of the posterior
    // occupancy gamma[t][s].
    res.grad.assign(static_cast<size_t>(t_len * num_classes), 0.0);
    for (int64_t t = 0; t < t_len; ++t) {
        for (int64_t s = 0; s < S; ++s) {
            double a = alpha[t * S + s], b = beta[t * S + s];
            if (a == kNegInf || b == kNegInf) continue;
            double gamma = std::exp(a + b - log_p);
            res.grad[t * num_classes + ext[s]] -= gamma;
        }
    }
    return res;
}

template <typename S>
Tensor<S> ctc_loss_batch(const Tensor<S>& log_probs, const std::vector<std::vector<int>>& labels,
                         CtcBatchResult* report) {
    if (log_probs.rank() != 3)
        throw std::invalid_argument("ctc_loss_batch: expected [n,T,C], got " +
                                    shape_str(log_probs.shape()));
    int64_t n = log_probs.dim(0), t_len = log_probs.dim(1), classes = log_probs.dim(2);
    if (static_cast<int64_t>(labels.size()) != n)
        throw std::invalid_argument("ctc_loss_batch: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(n));

    auto grads = std::make_shared<std::vector<double>>();
    grads->assign(static_cast<size_t>(log_probs.numel()), 0.0);
    CtcBatchResult local;
    double total = 0.0;
    std::vector<double> buf(static_cast<size_t>(t_len * classes));
    for (int64_t i = 0; i < n; ++i) {
        const S* src = log_probs.data() + i * t_len * classes;
        for (int64_t j = 0; j < t_len * classes; ++j) buf[j] = static_cast<double>(src[j]);
        CtcResult r = ctc_forward_backward(buf.data(), t_len, classes, labels[i]);
        if (!r.feasible) {
            local.skipped.push_back(i);
            continue;
        }
        total += r.loss;
        std::copy(r.grad.begin(), r.grad.end(),
                  grads->begin() + static_cast<size_t>(i * t_len * classes));
        ++local.counted;
    }
    if (report) *report = local;

    double mean = local.counted > 0 ? total / static_cast<double>(local.counted) : 0.0;
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(mean));
    if (log_probs.requires_grad() && local.counted > 0) {
        out.impl()->is_leaf = false;
        out.impl()->requires_grad = true;
        auto li = log_probs.impl();
        auto oi = out.impl();
        double inv = 1.0 / static_cast<double>(local.counted);
        out.impl()->parents = {li};
        out.impl()->backward_fn = [li, oi, grads, inv] {
            if (!(li->requires_grad)) return;
            li->ensure_grad();
            S dy = oi->grad[0];
            S* dst = li->grad.data();
            for (size_t j = 0; j < grads->size(); ++j)
                dst[j] += dy * static_cast<S>((*grads)[j] * inv);
        };
    }
    return out;
}

std::vector<int> collapse_alignment(const std::vector<int>& path, int blank_index) {
    std::vector<int> out;
    int prev = -1;
    for (int cls : path) {
        if (cls < 0 || cls > blank_index)
            throw std::invalid_argument("collapse_alignment: class " + std::to_string(cls) +
                                        " outside 0.." + std::to_string(blank_index));
        if (cls != prev && cls != blank_index) out.push_back(cls);
        prev = cls;
    }
    return out;
}

template <typename S>
std::vector<int> best_path(const S* values, int64_t t_len, int64_t num_classes) {
    std::vector<int> path(static_cast<size_t>(t_len));
    for (int64_t t = 0; t < t_len; ++t) {
        const S* row = values + t * num_classes;
        int best = 0;
        for (int64_t k = 1; k < num_classes; ++k)
            if (row[k] > row[best]) best = static_cast<int>(k);
        path[t] = best;
    }
    return path;
}

template <typename S>
std::string best_path_decode(const Tensor<S>& flat_sample, const Charset& charset) {
    const S* values;
    int64_t t_len, classes;
    if (flat_sample.rank() == 3) {
        if (flat_sample.dim(0) != 1)
            throw std::invalid_argument("best_path_decode: expected a single sample");
        t_len = flat_sample.dim(1);
        classes = flat_sample.dim(2);
        values = flat_sample.data();
    } else if (flat_sample.rank() == 2) {
        t_len = flat_sample.dim(0);
        classes = flat_sample.dim(1);
        values = flat_sample.data();
    } else {
        throw std::invalid_argument("best_path_decode: expected [T,C] or [1,T,C], got " +
                                    shape_str(flat_sample.shape()));
    }
    if (classes != charset.num_classes())
        throw std::invalid_argument("best_path_decode: lattice classes " + std::to_string(classes) +
                                    " do not match charset+blank " +
                                    std::to_string(charset.num_classes()));
    auto path = best_path(values, t_len, classes);
    return charset.decode(collapse_alignment(path, charset.blank_index()));
}

template Tensor<float> ctc_loss_batch(const Tensor<float>&, const std::vector<std::vector<int>>&,
                                      CtcBatchResult*);
template Tensor<double> ctc_loss_batch(const Tensor<double>&, const std::vector<std::vector<int>>&,
                                       CtcBatchResult*);
template std::vector<int> best_path(const float*, int64_t, int64_t);
template std::vector<int> best_path(const double*, int64_t, int64_t);
template std::string best_path_decode(const Tensor<float>&, const Charset&);
template std::string best_path_decode(const Tensor<double>&, const Charset&);

}  // namespace spanocr
