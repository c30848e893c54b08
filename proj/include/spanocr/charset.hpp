#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace spanocr {

std::vector<char32_t> utf8_decode(const std::string& s);
std::string utf8_encode(const std::vector<char32_t>& cps);
std::string utf8_encode(char32_t cp);

// Ordered character set of size N. Class indices 0..N-1 are the symbols in
// order; index N is the CTC blank, which is not itself a symbol.
class Charset {
public:
    Charset() = default;
    explicit Charset(const std::string& symbols_utf8);
    explicit Charset(std::vector<char32_t> symbols);

    int size() const { return static_cast<int>(symbols_.size()); }
    int blank_index() const { return size(); }
    int num_classes() const { return size() + 1; }

    bool contains(char32_t cp) const { return index_.count(cp) != 0; }
    int index_of(char32_t cp) const;
    char32_t symbol(int index) const;

    std::vector<int> encode(const std::string& text_utf8) const;
    std::string decode(const std::vector<int>& indices) const;

    const std::vector<char32_t>& symbols() const { return symbols_; }
    std::string to_utf8() const { return utf8_encode(symbols_); }

    bool operator==(const Charset& other) const { return symbols_ == other.symbols_; }

    // Sorted unique code points over a set of transcriptions.
    static Charset infer(const std::vector<std::string>& transcriptions);

private:
    std::vector<char32_t> symbols_;
    std::unordered_map<char32_t, int> index_;
};

}  // namespace spanocr
