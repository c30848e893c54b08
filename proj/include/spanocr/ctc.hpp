#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spanocr/charset.hpp"
#include "spanocr/tensor.hpp"

namespace spanocr {

// Loss and analytic gradient of one sample. Internals run in double and in
// log space regardless of S.
struct CtcResult {
    double loss = 0.0;           // -log P(label | log_probs)
    bool feasible = true;        // false when T cannot hold the expanded label
    std::vector<double> grad;    // d loss / d log_probs, [T * num_classes], empty if infeasible
};

// log_probs is a [T, num_classes] row-major buffer of per-step class
// log-probabilities; blank is the last class. Alignments follow the usual
// blank-interleaved forward-backward recursion.
CtcResult ctc_forward_backward(const double* log_probs, int64_t t_len, int64_t num_classes,
                               const std::vector<int>& label);

// Smallest T able to carry the label: one step per symbol plus one separating
// blank per adjacent repeat.
int64_t ctc_min_frames(const std::vector<int>& label);

// Graph node over a batch of flattened lattices. log_probs is [n, T, C]
// (e.g. log_softmax over a collapsed prediction grid); labels are per-sample
// charset indices. The loss is the mean over feasible samples; infeasible
// samples are skipped and reported.
struct CtcBatchResult {
    std::vector<int64_t> skipped;  // sample indices with infeasible labels
    int64_t counted = 0;
};

template <typename S>
Tensor<S> ctc_loss_batch(const Tensor<S>& log_probs, const std::vector<std::vector<int>>& labels,
                         CtcBatchResult* report = nullptr);

// Merge adjacent repeats, then remove blanks.
std::vector<int> collapse_alignment(const std::vector<int>& path, int blank_index);

// Per-step argmax over the flattened lattice (ties resolve to the lowest
// class index), collapsed to a string. values is [T, C] with blank last.
template <typename S>
std::vector<int> best_path(const S* values, int64_t t_len, int64_t num_classes);

template <typename S>
std::string best_path_decode(const Tensor<S>& flat_sample, const Charset& charset);

}  // namespace spanocr
