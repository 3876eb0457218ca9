#pragma once

// Unicode text helpers shared by grading and benchmark construction.

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <string>
#include <string_view>
#include <vector>

#include "groundprobe/error.hpp"

namespace groundprobe::text {

struct NormalizeOptions {
    bool case_sensitive = false;
};

inline std::u32string to_u32(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    const auto* p = reinterpret_cast<const uint8_t*>(s.data());
    int32_t i = 0;
    const auto n = static_cast<int32_t>(s.size());
    while (i < n) {
        UChar32 c;
        U8_NEXT(p, i, n, c);
        out.push_back(c < 0 ? U'�' : static_cast<char32_t>(c));
    }
    return out;
}

inline std::string to_utf8(std::u32string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char32_t c : s) {
        uint8_t buf[4];
        int32_t len = 0;
        UBool err = false;
        U8_APPEND(buf, len, 4, static_cast<UChar32>(c), err);
        if (err) {
            len = 0;
            U8_APPEND_UNSAFE(buf, len, 0xFFFD);
        }
        out.append(reinterpret_cast<const char*>(buf), static_cast<std::size_t>(len));
    }
    return out;
}

inline bool is_space(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)); }

inline std::string nfc(std::string_view s) {
    UErrorCode status = U_ZERO_ERROR;
    const auto* normalizer = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
    auto src = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
    auto dst = normalizer->normalize(src, status);
    if (U_FAILURE(status)) throw Error("NFC normalization failed");
    std::string out;
    dst.toUTF8String(out);
    return out;
}

inline std::string lowercase(std::string_view s) {
    auto u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
    u.toLower(icu::Locale::getRoot());
    std::string out;
    u.toUTF8String(out);
    return out;
}

/// Simple (1:1) case folding per code point, so indices line up with the input.
inline std::u32string fold_simple(std::u32string_view s) {
    std::u32string out(s);
    for (auto& c : out) c = static_cast<char32_t>(u_foldCase(static_cast<UChar32>(c), U_FOLD_CASE_DEFAULT));
    return out;
}

/// Grading normalization: NFC, lowercase, trim, collapse internal whitespace,
/// strip trailing sentence punctuation (.?!).
inline std::string normalize(std::string_view input, const NormalizeOptions& opts = {}) {
    std::string s = nfc(input);
    if (!opts.case_sensitive) s = lowercase(s);

    std::u32string out;
    bool pending_space = false;
    for (char32_t c : to_u32(s)) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(U' ');
        pending_space = false;
        out.push_back(c);
    }
    while (!out.empty() && (out.back() == U'.' || out.back() == U'?' || out.back() == U'!' || out.back() == U' '))
        out.pop_back();
    return to_utf8(out);
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> tokens;
    std::u32string cur;
    for (char32_t c : to_u32(s)) {
        if (is_space(c)) {
            if (!cur.empty()) tokens.push_back(to_utf8(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) tokens.push_back(to_utf8(cur));
    return tokens;
}

inline bool contains_normalized(std::string_view haystack, std::string_view needle, const NormalizeOptions& opts = {}) {
    auto n = normalize(needle, opts);
    if (n.empty()) return false;
    return normalize(haystack, opts).find(n) != std::string::npos;
}

inline std::string trim(std::string_view s) {
    auto u = to_u32(s);
    std::size_t b = 0, e = u.size();
    while (b < e && is_space(u[b])) ++b;
    while (e > b && is_space(u[e - 1])) --e;
    return to_utf8(std::u32string_view(u).substr(b, e - b));
}

inline std::string collapse_whitespace(std::string_view s) {
    auto tokens = split_whitespace(s);
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

}  // namespace groundprobe::text
