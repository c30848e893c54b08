#include "spanocr/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "spanocr/charset.hpp"

namespace spanocr {

template <typename T>
int64_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
    size_t n = a.size(), m = b.size();
    if (n == 0) return static_cast<int64_t>(m);
    if (m == 0) return static_cast<int64_t>(n);
    std::vector<int64_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= m; ++j) {
            int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

template int64_t levenshtein(const std::vector<char32_t>&, const std::vector<char32_t>&);
template int64_t levenshtein(const std::vector<std::string>&, const std::vector<std::string>&);
template int64_t levenshtein(const std::vector<int>&, const std::vector<int>&);

std::string strip_line_breaks(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '\n' || s[i] == '\r') {
            while (i < s.size() && (s[i] == '\n' || s[i] == '\r')) ++i;
            out.push_back(' ');
        } else {
            out.push_back(s[i++]);
        }
    }
    return out;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

int64_t char_edits(const std::string& gt, const std::string& pred) {
    return levenshtein(utf8_decode(strip_line_breaks(gt)), utf8_decode(strip_line_breaks(pred)));
}

int64_t word_edits(const std::string& gt, const std::string& pred) {
    return levenshtein(split_words(strip_line_breaks(gt)), split_words(strip_line_breaks(pred)));
}

int64_t char_count(const std::string& s) {
    return static_cast<int64_t>(utf8_decode(strip_line_breaks(s)).size());
}

int64_t word_count(const std::string& s) {
    return static_cast<int64_t>(split_words(strip_line_breaks(s)).size());
}

namespace {
double rate(int64_t edits, int64_t total) {
    if (total == 0) return edits == 0 ? 0.0 : static_cast<double>(edits);
    return static_cast<double>(edits) / static_cast<double>(total);
}
}  // namespace

double cer(const std::string& gt, const std::string& pred) {
    return rate(char_edits(gt, pred), char_count(gt));
}

double wer(const std::string& gt, const std::string& pred) {
    return rate(word_edits(gt, pred), word_count(gt));
}

EvalRow score_pair(const std::string& id, const std::string& gt, const std::string& pred) {
    EvalRow row;
    row.id = id;
    row.ground_truth = strip_line_breaks(gt);
    row.prediction = strip_line_breaks(pred);
    row.char_edit_count = char_edits(gt, pred);
    row.char_total = char_count(gt);
    row.word_edit_count = word_edits(gt, pred);
    row.word_total = word_count(gt);
    row.cer = rate(row.char_edit_count, row.char_total);
    row.wer = rate(row.word_edit_count, row.word_total);
    return row;
}

void EvalReport::add(EvalRow row) {
    total_edit_chars += row.char_edit_count;
    total_gt_chars += row.char_total;
    total_edit_words += row.word_edit_count;
    total_gt_words += row.word_total;
    rows.push_back(std::move(row));
}

void EvalReport::finalize() {
    cer = rate(total_edit_chars, total_gt_chars);
    wer = rate(total_edit_words, total_gt_words);
    double cs = 0.0, ws = 0.0;
    for (const auto& r : rows) {
        cs += r.cer;
        ws += r.wer;
    }
    mean_cer = rows.empty() ? 0.0 : cs / static_cast<double>(rows.size());
    mean_wer = rows.empty() ? 0.0 : ws / static_cast<double>(rows.size());
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os << "# id\tchar_edits\tchar_total\tcer\tword_edits\tword_total\twer\tprediction\n";
    for (const auto& r : rows) {
        os << r.id << '\t' << r.char_edit_count << '\t' << r.char_total << '\t' << r.cer << '\t'
           << r.word_edit_count << '\t' << r.word_total << '\t' << r.wer << '\t' << r.prediction
           << '\n';
    }
    os << "# corpus samples=" << rows.size() << " cer=" << cer << " wer=" << wer
       << " mean_cer=" << mean_cer << " mean_wer=" << mean_wer
       << " edit_chars=" << total_edit_chars << " gt_chars=" << total_gt_chars
       << " edit_words=" << total_edit_words << " gt_words=" << total_gt_words << '\n';
    return os.str();
}

}  // namespace spanocr
