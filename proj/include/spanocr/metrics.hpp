#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spanocr {

// Unit-cost insertions, deletions and substitutions.
template <typename T>
int64_t levenshtein(const std::vector<T>& a, const std::vector<T>& b);

// Distances are taken over code points (cer) and whitespace-separated tokens
// (wer), normalized by the ground-truth length. Empty gt with nonempty pred
// scores edits/1; two empties score 0.
double cer(const std::string& gt, const std::string& pred);
double wer(const std::string& gt, const std::string& pred);

int64_t char_edits(const std::string& gt, const std::string& pred);
int64_t word_edits(const std::string& gt, const std::string& pred);
int64_t char_count(const std::string& s);
int64_t word_count(const std::string& s);

std::vector<std::string> split_words(const std::string& s);

// Line breaks never participate in scoring or training labels.
std::string strip_line_breaks(const std::string& s);

struct EvalRow {
    std::string id;
    std::string ground_truth;
    std::string prediction;
    int64_t char_edit_count = 0;
    int64_t char_total = 0;
    int64_t word_edit_count = 0;
    int64_t word_total = 0;
    double cer = 0.0;
    double wer = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    int64_t total_edit_chars = 0;
    int64_t total_gt_chars = 0;
    int64_t total_edit_words = 0;
    int64_t total_gt_words = 0;
    double cer = 0.0;       // micro average: sum(edits) / sum(lengths)
    double wer = 0.0;
    double mean_cer = 0.0;  // mean of per-sample rates, reported alongside
    double mean_wer = 0.0;

    void add(EvalRow row);
    void finalize();
    std::string to_text() const;
};

EvalRow score_pair(const std::string& id, const std::string& gt, const std::string& pred);

}  // namespace spanocr
