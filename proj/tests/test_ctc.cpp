#include <doctest.h>

#include <cmath>

#include "spanocr/ctc.hpp"
#include "spanocr/ops.hpp"
#include "testutil.hpp"

using namespace spanocr;

namespace {

std::vector<double> log_of(const std::vector<std::vector<double>>& probs) {
    std::vector<double> out;
    for (const auto& row : probs)
        for (double p : row) out.push_back(std::log(p));
    return out;
}

std::vector<std::vector<double>> random_prob_rows(int64_t t_len, int64_t classes, Rng& rng) {
    std::vector<std::vector<double>> rows(static_cast<size_t>(t_len),
                                          std::vector<double>(static_cast<size_t>(classes)));
    for (auto& row : rows) {
        double total = 0;
        for (auto& p : row) {
            p = rng.uniform(0.05, 1.0);
            total += p;
        }
        for (auto& p : row) p /= total;
    }
    return rows;
}

}  // namespace

TEST_CASE("ctc all-blank empty label has zero loss") {
    // blank prob 1 at every step
    std::vector<std::vector<double>> probs = {{1e-30, 1.0}, {1e-30, 1.0}, {1e-30, 1.0}};
    auto lp = log_of(probs);
    auto res = ctc_forward_backward(lp.data(), 3, 2, {});
    CHECK(res.feasible);
    CHECK(res.loss == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ctc two-step single-symbol example") {
    // classes {a, blank}; P(a)=0.6, P(blank)=0.4 each step; label "a"
    std::vector<std::vector<double>> probs = {{0.6, 0.4}, {0.6, 0.4}};
    auto lp = log_of(probs);
    auto res = ctc_forward_backward(lp.data(), 2, 2, {0});
    CHECK(res.feasible);
    // paths aa, a-, -a
    CHECK(std::exp(-res.loss) == doctest::Approx(0.84).epsilon(1e-12));
    CHECK(res.loss == doctest::Approx(-std::log(0.84)).epsilon(1e-12));
}

TEST_CASE("ctc matches exhaustive path enumeration") {
    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        int64_t t_len = rng.uniform_int(1, 6);
        int64_t n_symbols = rng.uniform_int(1, 3);
        int64_t classes = n_symbols + 1;
        int64_t label_len = rng.uniform_int(0, 3);
        std::vector<int> label;
        for (int64_t i = 0; i < label_len; ++i)
            label.push_back(static_cast<int>(rng.uniform_int(0, n_symbols - 1)));
        auto probs = random_prob_rows(t_len, classes, rng);
        double brute = testutil::ctc_brute_force(probs, label, static_cast<int>(n_symbols));
        auto lp = log_of(probs);
        auto res = ctc_forward_backward(lp.data(), t_len, classes, label);
        if (brute == 0.0) {
            CHECK(!res.feasible);
        } else {
            REQUIRE(res.feasible);
            CHECK(std::abs(std::exp(-res.loss) - brute) < 1e-10);
        }
    }
}

TEST_CASE("ctc infeasible label is reported, not thrown") {
    std::vector<std::vector<double>> probs = {{0.5, 0.5}};
    auto lp = log_of(probs);
    auto res = ctc_forward_backward(lp.data(), 1, 2, {0, 0});
    CHECK(!res.feasible);
    CHECK(std::isinf(res.loss));
    CHECK(ctc_min_frames({0, 0}) == 3);
    CHECK(ctc_min_frames({0, 1, 1, 0}) == 5);
    CHECK(ctc_min_frames({}) == 0);
}

TEST_CASE("ctc stays finite for tiny probabilities") {
    std::vector<std::vector<double>> probs(8, {1e-30, 1e-30, 1.0 - 2e-30});
    auto lp = log_of(probs);
    auto res = ctc_forward_backward(lp.data(), 8, 3, {0, 1});
    CHECK(res.feasible);
    CHECK(std::isfinite(res.loss));
    for (double g : res.grad) CHECK(std::isfinite(g));
}

TEST_CASE("ctc per-step gradient sums through log_softmax to zero") {
    Rng rng(103);
    int64_t t_len = 7, classes = 5;
    auto logits = Tensor<double>::zeros({1, t_len, classes}, true);
    testutil::fill_uniform(logits, rng, -2, 2);
    auto lp = ops::log_softmax_lastdim(logits);
    auto loss = ctc_loss_batch(lp, {{0, 2, 1}});
    loss.backward();
    for (int64_t t = 0; t < t_len; ++t) {
        double row_sum = 0;
        for (int64_t k = 0; k < classes; ++k)
            row_sum += logits.grad()[static_cast<size_t>(t * classes + k)];
        CHECK(std::abs(row_sum) < 1e-8);
    }
}

TEST_CASE("ctc gradient matches finite differences") {
    Rng rng(107);
    for (int trial = 0; trial < 5; ++trial) {
        int64_t t_len = rng.uniform_int(3, 8);
        int64_t classes = rng.uniform_int(3, 5);
        std::vector<int> label;
        int64_t label_len = rng.uniform_int(1, 2);
        for (int64_t i = 0; i < label_len; ++i)
            label.push_back(static_cast<int>(rng.uniform_int(0, classes - 2)));
        auto logits = Tensor<double>::zeros({1, t_len, classes}, true);
        testutil::fill_uniform(logits, rng, -1.5, 1.5);
        auto res = testutil::grad_check(
            [&] { return ctc_loss_batch(ops::log_softmax_lastdim(logits), {label}); }, {logits});
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("ctc loss monotone in correct-symbol probability") {
    // raising the probability of the correct next symbol never increases loss
    Rng rng(109);
    int64_t t_len = 4, classes = 3;
    std::vector<int> label = {0, 1};
    auto probs = random_prob_rows(t_len, classes, rng);
    auto lp = log_of(probs);
    auto base = ctc_forward_backward(lp.data(), t_len, classes, label);
    REQUIRE(base.feasible);
    for (int64_t t = 0; t < t_len; ++t)
        for (int cls : {0, 1}) {
            // gradient of -logP w.r.t. log p[t][cls] must be <= 0 for symbols
            // of the label (more mass on them cannot hurt)
            CHECK(base.grad[static_cast<size_t>(t * classes + cls)] <= 1e-12);
        }
}

TEST_CASE("ctc batch mean and infeasible skipping") {
    auto lp = Tensor<double>::zeros({2, 2, 3}, true);
    // sample 0: uniform probs; sample 1: infeasible label (needs 3 frames)
    for (auto& v : lp.values()) v = std::log(1.0 / 3.0);
    CtcBatchResult report;
    auto loss = ctc_loss_batch(lp, {{0}, {0, 0}}, &report);
    CHECK(report.counted == 1);
    REQUIRE(report.skipped.size() == 1);
    CHECK(report.skipped[0] == 1);
    // skipped sample contributes no gradient
    loss.backward();
    for (int64_t j = 0; j < 6; ++j) CHECK(lp.grad()[static_cast<size_t>(6 + j)] == 0.0);
}

TEST_CASE("collapse_alignment merges repeats then removes blanks") {
    int blank = 2;
    CHECK(collapse_alignment({blank, 0, 0, blank, 1, 1, blank}, blank) == std::vector<int>{0, 1});
    CHECK(collapse_alignment({0, blank, 0}, blank) == std::vector<int>{0, 0});
    CHECK(collapse_alignment({blank, blank, blank}, blank).empty());
    CHECK(collapse_alignment({}, blank).empty());
}

TEST_CASE("best path decode spells out one-hot lattice") {
    Charset cs("hi");
    // steps: blank, h, i
    auto flat = Tensor<float>::zeros({3, 3});
    flat.at({0, 2}) = 5.0f;
    flat.at({1, 0}) = 5.0f;
    flat.at({2, 1}) = 5.0f;
    CHECK(best_path_decode(flat, cs) == "hi");
}

TEST_CASE("best path argmax tie resolves to lowest index") {
    Charset cs("ab");
    auto flat = Tensor<float>::zeros({2, 3});  // all logits equal
    CHECK(best_path(flat.data(), 2, 3) == std::vector<int>{0, 0});
    CHECK(best_path_decode(flat, cs) == "a");
}

TEST_CASE("two grid rows with blank row between decode without separator") {
    Charset cs("ab");
    int blank = cs.blank_index();
    // grid 1 x 3 x 3 x 2: rows "ab", blank row, "ba"
    auto grid = Tensor<float>::full({1, 3, 3, 2}, -5.0f);
    auto put = [&](int64_t row, int64_t col, int cls) { grid.at({0, cls, row, col}) = 5.0f; };
    put(0, 0, 0);
    put(0, 1, 1);
    put(1, 0, blank);
    put(1, 1, blank);
    put(2, 0, 1);
    put(2, 1, 0);
    auto flat = ops::collapse_rows(grid);
    CHECK(best_path_decode(flat, cs) == "abba");
    CHECK(best_path_decode(flat, cs).find('\n') == std::string::npos);
}

TEST_CASE("decoded output has no blank and no sustained-run duplicates") {
    Rng rng(113);
    Charset cs("abc");
    auto flat = Tensor<float>::zeros({20, 4});
    for (auto& v : flat.values()) v = static_cast<float>(rng.uniform(-1, 1));
    auto path = best_path(flat.data(), 20, 4);
    auto collapsed = collapse_alignment(path, cs.blank_index());
    // no blanks survive
    for (int cls : collapsed) CHECK(cls != cs.blank_index());
    // a sustained argmax run contributes exactly one symbol
    CHECK(collapse_alignment({1, 1, 1, 1}, cs.blank_index()) == std::vector<int>{1});
    CHECK(collapse_alignment({3, 1, 1, 3, 1}, cs.blank_index()) == std::vector<int>{1, 1});
}
