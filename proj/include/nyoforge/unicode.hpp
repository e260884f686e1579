#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nyoforge/unicode_data.hpp"

namespace nyoforge::unicode {

inline void append_utf8(std::string& out, uint32_t cp) {
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
}

inline std::string to_utf8(const std::vector<uint32_t>& cps) {
    std::string out;
    for (uint32_t cp : cps) append_utf8(out, cp);
    return out;
}

// Strict decode of the next scalar value at `i`. Returns false on any
// malformed prefix (overlong, surrogate, out of range, truncated) and
// leaves `i` untouched so the caller can treat s[i] as a raw byte.
inline bool decode_next(std::string_view s, size_t& i, uint32_t& cp) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        cp = b0;
        i += 1;
        return true;
    }
    int len;
    uint32_t v;
    if ((b0 & 0xE0) == 0xC0) { len = 2; v = b0 & 0x1F; }
    else if ((b0 & 0xF0) == 0xE0) { len = 3; v = b0 & 0x0F; }
    else if ((b0 & 0xF8) == 0xF0) { len = 4; v = b0 & 0x07; }
    else return false;
    if (i + len > s.size()) return false;
    for (int k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) return false;
        v = (v << 6) | (b & 0x3F);
    }
    if (len == 2 && v < 0x80) return false;
    if (len == 3 && v < 0x800) return false;
    if (len == 4 && v < 0x10000) return false;
    if (v > 0x10FFFF || (v >= 0xD800 && v <= 0xDFFF)) return false;
    cp = v;
    i += len;
    return true;
}

inline uint8_t combining_class(uint32_t cp) {
    const auto* begin = unicode_data::kCccRanges;
    const auto* end = begin + std::size(unicode_data::kCccRanges);
    auto it = std::upper_bound(begin, end, cp, [](uint32_t v, const unicode_data::CccRange& r) {
        return v < r.first;
    });
    if (it == begin) return 0;
    --it;
    return cp <= it->last ? it->ccc : 0;
}

inline const unicode_data::Decomp* find_decomp(uint32_t cp) {
    const auto* begin = unicode_data::kDecomp;
    const auto* end = begin + std::size(unicode_data::kDecomp);
    auto it = std::lower_bound(begin, end, cp, [](const unicode_data::Decomp& d, uint32_t v) {
        return d.cp < v;
    });
    return (it != end && it->cp == cp) ? it : nullptr;
}

inline uint32_t compose_pair(uint32_t a, uint32_t b) {
    // Hangul LV / LVT
    constexpr uint32_t SBase = 0xAC00, LBase = 0x1100, VBase = 0x1161, TBase = 0x11A7;
    constexpr uint32_t LCount = 19, VCount = 21, TCount = 28, NCount = VCount * TCount;
    if (a >= LBase && a < LBase + LCount && b >= VBase && b < VBase + VCount) {
        return SBase + ((a - LBase) * VCount + (b - VBase)) * TCount;
    }
    if (a >= SBase && a < SBase + LCount * NCount && (a - SBase) % TCount == 0 &&
        b > TBase && b < TBase + TCount) {
        return a + (b - TBase);
    }
    const uint64_t key = (static_cast<uint64_t>(a) << 21) | b;
    const auto* begin = unicode_data::kComp;
    const auto* end = begin + std::size(unicode_data::kComp);
    auto it = std::lower_bound(begin, end, key, [](const unicode_data::Comp& c, uint64_t k) {
        return c.key < k;
    });
    return (it != end && it->key == key) ? it->composite : 0;
}

inline void decompose_into(uint32_t cp, std::vector<uint32_t>& out) {
    constexpr uint32_t SBase = 0xAC00, LBase = 0x1100, VBase = 0x1161, TBase = 0x11A7;
    constexpr uint32_t SCount = 11172, VCount = 21, TCount = 28;
    if (cp >= SBase && cp < SBase + SCount) {
        const uint32_t idx = cp - SBase;
        out.push_back(LBase + idx / (VCount * TCount));
        out.push_back(VBase + (idx % (VCount * TCount)) / TCount);
        if (idx % TCount != 0) out.push_back(TBase + idx % TCount);
        return;
    }
    if (const auto* d = find_decomp(cp)) {
        decompose_into(d->a, out);
        if (d->b != 0) decompose_into(d->b, out);
        return;
    }
    out.push_back(cp);
}

// NFC over a code point sequence: canonical decomposition, canonical
// ordering, then canonical composition (UAX #15).
inline std::vector<uint32_t> nfc(const std::vector<uint32_t>& input) {
    std::vector<uint32_t> buf;
    buf.reserve(input.size());
    for (uint32_t cp : input) decompose_into(cp, buf);

    // canonical ordering: bubble adjacent marks with descending ccc
    for (size_t i = 1; i < buf.size(); ++i) {
        uint8_t cc = combining_class(buf[i]);
        if (cc == 0) continue;
        size_t j = i;
        while (j > 0) {
            uint8_t prev = combining_class(buf[j - 1]);
            if (prev == 0 || prev <= cc) break;
            std::swap(buf[j - 1], buf[j]);
            --j;
        }
    }

    std::vector<uint32_t> out;
    out.reserve(buf.size());
    ptrdiff_t starter = -1;
    uint8_t last_cc = 0;
    for (uint32_t cp : buf) {
        const uint8_t cc = combining_class(cp);
        if (starter >= 0) {
            const bool unblocked =
                (last_cc == 0 && static_cast<size_t>(starter) == out.size() - 1) || last_cc < cc;
            if (unblocked) {
                if (uint32_t comp = compose_pair(out[starter], cp)) {
                    out[starter] = comp;
                    continue;
                }
            }
        }
        out.push_back(cp);
        if (cc == 0) {
            starter = static_cast<ptrdiff_t>(out.size()) - 1;
            last_cc = 0;
        } else {
            last_cc = cc;
        }
    }
    return out;
}

// NFC over a byte string. Well-formed UTF-8 runs are normalized; bytes
// that are not part of a valid scalar value pass through untouched, so
// the function is total and the identity on already-normalized input.
inline std::string normalize(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    std::vector<uint32_t> run;
    size_t i = 0;
    auto flush = [&] {
        if (run.empty()) return;
        for (uint32_t cp : nfc(run)) append_utf8(out, cp);
        run.clear();
    };
    while (i < text.size()) {
        uint32_t cp;
        if (decode_next(text, i, cp)) {
            run.push_back(cp);
        } else {
            flush();
            out.push_back(text[i]);
            ++i;
        }
    }
    flush();
    return out;
}

}  // namespace nyoforge::unicode
