#include "spanocr/charset.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace spanocr {

std::vector<char32_t> utf8_decode(const std::string& s) {
    std::vector<char32_t> out;
    out.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        unsigned char b = static_cast<unsigned char>(s[i]);
        char32_t cp;
        int extra;
        if (b < 0x80) {
            cp = b;
            extra = 0;
        } else if ((b & 0xE0) == 0xC0) {
            cp = b & 0x1F;
            extra = 1;
        } else if ((b & 0xF0) == 0xE0) {
            cp = b & 0x0F;
            extra = 2;
        } else if ((b & 0xF8) == 0xF0) {
            cp = b & 0x07;
            extra = 3;
        } else {
            throw std::invalid_argument("utf8: invalid lead byte at offset " + std::to_string(i));
        }
        if (i + extra >= s.size())
            throw std::invalid_argument("utf8: truncated sequence at offset " + std::to_string(i));
        for (int k = 1; k <= extra; ++k) {
            unsigned char cb = static_cast<unsigned char>(s[i + k]);
            if ((cb & 0xC0) != 0x80)
                throw std::invalid_argument("utf8: invalid continuation byte at offset " +
                                            std::to_string(i + k));
            cp = (cp << 6) | (cb & 0x3F);
        }
        out.push_back(cp);
        i += 1 + extra;
    }
    return out;
}

std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

std::string utf8_encode(const std::vector<char32_t>& cps) {
    std::string out;
    for (char32_t cp : cps) out += utf8_encode(cp);
    return out;
}

Charset::Charset(const std::string& symbols_utf8) : Charset(utf8_decode(symbols_utf8)) {}

Charset::Charset(std::vector<char32_t> symbols) : symbols_(std::move(symbols)) {
    for (size_t i = 0; i < symbols_.size(); ++i) {
        if (!index_.emplace(symbols_[i], static_cast<int>(i)).second)
            throw std::invalid_argument("charset: duplicate symbol '" + utf8_encode(symbols_[i]) +
                                        "'");
    }
}

int Charset::index_of(char32_t cp) const {
    auto it = index_.find(cp);
    if (it == index_.end())
        throw std::invalid_argument("charset: symbol '" + utf8_encode(cp) + "' not in charset");
    return it->second;
}

char32_t Charset::symbol(int index) const {
    if (index < 0 || index >= size())
        throw std::invalid_argument("charset: index " + std::to_string(index) + " out of range 0.." +
                                    std::to_string(size() - 1));
    return symbols_[static_cast<size_t>(index)];
}

std::vector<int> Charset::encode(const std::string& text_utf8) const {
    std::vector<int> out;
    for (char32_t cp : utf8_decode(text_utf8)) out.push_back(index_of(cp));
    return out;
}

std::string Charset::decode(const std::vector<int>& indices) const {
    std::string out;
    for (int idx : indices) out += utf8_encode(symbol(idx));
    return out;
}

Charset Charset::infer(const std::vector<std::string>& transcriptions) {
    std::set<char32_t> seen;
    for (const auto& t : transcriptions)
        for (char32_t cp : utf8_decode(t)) seen.insert(cp);
    return Charset(std::vector<char32_t>(seen.begin(), seen.end()));
}

}  // namespace spanocr
