#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nyoforge/errors.hpp"
#include "nyoforge/unicode.hpp"

namespace nyoforge {

// Fixed id layout. Everything below kFirstLearnedId is mandatory and
// position-coded; learned tokens (single characters, then merges) follow.
//   0          <s>
//   1          </s>
//   2          <pad>
//   3..258     byte-fallback tokens <0x00>..<0xFF>
//   259..282   whitespace-run tokens, literal runs of 1..24 spaces
//   283..292   digits 0..9
inline constexpr int32_t kBosId = 0;
inline constexpr int32_t kEosId = 1;
inline constexpr int32_t kPadId = 2;
inline constexpr int32_t kByteBase = 3;
inline constexpr int32_t kSpaceRunBase = kByteBase + 256;
inline constexpr int32_t kMaxSpaceRun = 24;
inline constexpr int32_t kDigitBase = kSpaceRunBase + kMaxSpaceRun;
inline constexpr int32_t kFirstLearnedId = kDigitBase + 10;

enum class PretokenKind { word, digit, space_run, other_byte };

struct Pretoken {
    PretokenKind kind;
    std::string text;  // surface bytes; for space_run a run of <= 24 spaces
};

// Splits normalized text into word / digit / space-run / other-byte
// pretokens. Concatenating the surfaces reproduces the input exactly.
// Runs of U+0020 are chunked greedily into pieces of at most 24; every
// ASCII digit stands alone; bytes outside valid UTF-8 come out one at a
// time as other_byte.
inline std::vector<Pretoken> pretokenize(std::string_view normalized) {
    std::vector<Pretoken> out;
    std::string word;
    auto flush_word = [&] {
        if (!word.empty()) {
            out.push_back({PretokenKind::word, word});
            word.clear();
        }
    };
    size_t i = 0;
    while (i < normalized.size()) {
        uint32_t cp;
        size_t start = i;
        if (!unicode::decode_next(normalized, i, cp)) {
            flush_word();
            out.push_back({PretokenKind::other_byte, std::string(1, normalized[start])});
            ++i;
            continue;
        }
        if (cp == 0x20) {
            flush_word();
            int run = 1;
            while (i < normalized.size() && normalized[i] == ' ' && run < kMaxSpaceRun) {
                ++i;
                ++run;
            }
            out.push_back({PretokenKind::space_run, std::string(run, ' ')});
            continue;
        }
        if (cp >= '0' && cp <= '9') {
            flush_word();
            out.push_back({PretokenKind::digit, std::string(1, static_cast<char>(cp))});
            continue;
        }
        word.append(normalized.substr(start, i - start));
    }
    flush_word();
    return out;
}

struct TokenizerMetrics {
    double compression_rate = 0.0;          // UTF-8 bytes per token
    double fertility = 0.0;                 // tokens per whitespace-delimited word
    double continued_word_proportion = 0.0; // word-tokens that are not word-initial
};

class TokenizerModel {
public:
    std::vector<std::string> vocab;                           // id -> token string
    std::vector<std::pair<std::string, std::string>> merges;  // rank order

    static TokenizerModel with_base_vocab() {
        TokenizerModel m;
        m.vocab.reserve(kFirstLearnedId);
        m.vocab.push_back("<s>");
        m.vocab.push_back("</s>");
        m.vocab.push_back("<pad>");
        for (int b = 0; b < 256; ++b) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<0x%02X>", b);
            m.vocab.emplace_back(buf);
        }
        for (int n = 1; n <= kMaxSpaceRun; ++n) m.vocab.push_back(std::string(n, ' '));
        for (char d = '0'; d <= '9'; ++d) m.vocab.push_back(std::string(1, d));
        m.rebuild_index();
        return m;
    }

    int32_t size() const { return static_cast<int32_t>(vocab.size()); }

    int32_t id_of(std::string_view tok) const {
        auto it = token_to_id_.find(std::string(tok));
        return it == token_to_id_.end() ? -1 : it->second;
    }

    int32_t merge_rank(const std::string& left, const std::string& right) const {
        auto it = merge_rank_.find({left, right});
        return it == merge_rank_.end() ? -1 : it->second;
    }

    static bool is_byte(int32_t id) { return id >= kByteBase && id < kByteBase + 256; }
    static bool is_space_run(int32_t id) { return id >= kSpaceRunBase && id < kSpaceRunBase + kMaxSpaceRun; }
    static bool is_digit(int32_t id) { return id >= kDigitBase && id < kDigitBase + 10; }

    // The text a single token contributes on decode. BOS/EOS/PAD render
    // empty; byte tokens contribute their raw byte.
    std::string surface(int32_t id) const {
        if (id < 0 || id >= size()) throw IdOutOfRange("token id " + std::to_string(id));
        if (id == kBosId || id == kEosId || id == kPadId) return "";
        if (is_byte(id)) return std::string(1, static_cast<char>(id - kByteBase));
        return vocab[static_cast<size_t>(id)];
    }

    void add_token(const std::string& tok) {
        token_to_id_.emplace(tok, size());
        vocab.push_back(tok);
    }

    void add_merge(const std::string& left, const std::string& right) {
        merge_rank_.emplace(std::make_pair(left, right), static_cast<int32_t>(merges.size()));
        merges.emplace_back(left, right);
    }

    void rebuild_index() {
        token_to_id_.clear();
        for (int32_t i = 0; i < size(); ++i) {
            if (!token_to_id_.emplace(vocab[static_cast<size_t>(i)], i).second)
                throw Error("duplicate token string in vocab: " + vocab[static_cast<size_t>(i)]);
        }
        merge_rank_.clear();
        for (int32_t r = 0; r < static_cast<int32_t>(merges.size()); ++r)
            merge_rank_.emplace(merges[static_cast<size_t>(r)], r);
    }

private:
    std::unordered_map<std::string, int32_t> token_to_id_;
    std::map<std::pair<std::string, std::string>, int32_t> merge_rank_;
};

namespace detail {

// Characters that never enter the trainable alphabet: C0 controls and
// DEL always take the byte-fallback path (tabs and newlines included).
inline bool mergeable_char(uint32_t cp) { return cp > 0x1F && cp != 0x7F; }

inline std::vector<std::string> split_chars(std::string_view word) {
    std::vector<std::string> syms;
    size_t i = 0;
    while (i < word.size()) {
        size_t start = i;
        uint32_t cp;
        if (!unicode::decode_next(word, i, cp)) ++i;  // lone byte as its own symbol
        syms.emplace_back(word.substr(start, i - start));
    }
    return syms;
}

inline void append_byte_fallback(const std::string& sym, std::vector<int32_t>& ids) {
    for (char c : sym) ids.push_back(kByteBase + static_cast<unsigned char>(c));
}

// Applies learned merges to one word pretoken: repeatedly pick the
// lowest-rank pair present and replace every occurrence left to right.
inline void encode_word(const TokenizerModel& m, std::string_view word,
                        std::vector<int32_t>& ids) {
    std::vector<std::string> syms = split_chars(word);
    while (syms.size() > 1) {
        int32_t best_rank = -1;
        size_t best = 0;
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            int32_t r = m.merge_rank(syms[i], syms[i + 1]);
            if (r >= 0 && (best_rank < 0 || r < best_rank)) {
                best_rank = r;
                best = i;
            }
        }
        if (best_rank < 0) break;
        const std::string left = syms[best];
        const std::string right = syms[best + 1];
        std::vector<std::string> next;
        next.reserve(syms.size());
        size_t i = 0;
        while (i < syms.size()) {
            if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
                next.push_back(left + right);
                i += 2;
            } else {
                next.push_back(std::move(syms[i]));
                ++i;
            }
        }
        syms = std::move(next);
    }
    for (const auto& sym : syms) {
        int32_t id = m.id_of(sym);
        if (id >= 0) ids.push_back(id);
        else append_byte_fallback(sym, ids);
    }
}

}  // namespace detail

struct TaggedId {
    int32_t id;
    PretokenKind kind;
};

inline std::vector<TaggedId> encode_tagged(const TokenizerModel& m, std::string_view text) {
    std::vector<TaggedId> out;
    const std::string norm = unicode::normalize(text);
    std::vector<int32_t> scratch;
    for (const Pretoken& p : pretokenize(norm)) {
        scratch.clear();
        switch (p.kind) {
            case PretokenKind::space_run:
                scratch.push_back(kSpaceRunBase + static_cast<int32_t>(p.text.size()) - 1);
                break;
            case PretokenKind::digit:
                scratch.push_back(kDigitBase + (p.text[0] - '0'));
                break;
            case PretokenKind::other_byte:
                detail::append_byte_fallback(p.text, scratch);
                break;
            case PretokenKind::word:
                detail::encode_word(m, p.text, scratch);
                break;
        }
        for (int32_t id : scratch) out.push_back({id, p.kind});
    }
    return out;
}

inline std::vector<int32_t> encode(const TokenizerModel& m, std::string_view text,
                                   bool add_bos_eos = false) {
    std::vector<int32_t> ids;
    if (add_bos_eos) ids.push_back(kBosId);
    for (const TaggedId& t : encode_tagged(m, text)) ids.push_back(t.id);
    if (add_bos_eos) ids.push_back(kEosId);
    return ids;
}

inline std::string decode(const TokenizerModel& m, std::span<const int32_t> ids) {
    std::string out;
    for (int32_t id : ids) out += m.surface(id);
    return out;
}

struct BpeTrainConfig {
    int32_t target_vocab_size = 512;
};

// Learns BPE merges over word pretokens. Digit and space-run pretokens
// never participate; every merge joins two existing vocab tokens, so at
// each step the candidate is the (frequency, lexicographically smaller
// pair) maximum. Deterministic for a fixed corpus and config.
inline TokenizerModel train_bpe(const std::vector<std::string>& corpus,
                                const BpeTrainConfig& cfg = {}) {
    if (corpus.empty()) throw EmptyCorpus("train_bpe: corpus has no records");
    if (cfg.target_vocab_size < kFirstLearnedId)
        throw TargetTooSmall("target_vocab_size " + std::to_string(cfg.target_vocab_size) +
                             " < mandatory " + std::to_string(kFirstLearnedId));

    TokenizerModel model = TokenizerModel::with_base_vocab();

    std::map<std::string, int64_t> word_counts;
    for (const std::string& text : corpus) {
        const std::string norm = unicode::normalize(text);
        for (const Pretoken& p : pretokenize(norm))
            if (p.kind == PretokenKind::word) ++word_counts[p.text];
    }

    // Alphabet by frequency (desc), then code point (asc), while room remains.
    std::map<std::string, int64_t> char_freq;
    for (const auto& [word, count] : word_counts) {
        for (const auto& sym : detail::split_chars(word)) {
            size_t i = 0;
            uint32_t cp = 0xFFFFFFFF;
            unicode::decode_next(sym, i, cp);
            if (detail::mergeable_char(cp) && i == sym.size()) char_freq[sym] += count;
        }
    }
    std::vector<std::pair<std::string, int64_t>> alphabet(char_freq.begin(), char_freq.end());
    std::sort(alphabet.begin(), alphabet.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [ch, freq] : alphabet) {
        if (model.size() >= cfg.target_vocab_size) break;
        if (model.id_of(ch) < 0) model.add_token(ch);
    }

    // Words as sequences of symbol handles; only vocab symbols may merge.
    std::vector<std::string> syms;
    std::map<std::string, int32_t> sym_id;
    auto intern = [&](const std::string& s) {
        auto it = sym_id.find(s);
        if (it != sym_id.end()) return it->second;
        int32_t h = static_cast<int32_t>(syms.size());
        syms.push_back(s);
        sym_id.emplace(s, h);
        return h;
    };

    std::vector<std::vector<int32_t>> words;
    std::vector<int64_t> counts;
    std::vector<bool> can_merge;  // per symbol handle
    for (const auto& [word, count] : word_counts) {
        std::vector<int32_t> seq;
        for (const auto& s : detail::split_chars(word)) {
            int32_t h = intern(s);
            if (static_cast<size_t>(h) >= can_merge.size())
                can_merge.push_back(model.id_of(s) >= 0);
            seq.push_back(h);
        }
        words.push_back(std::move(seq));
        counts.push_back(count);
    }

    using Pair = std::pair<int32_t, int32_t>;
    std::map<Pair, int64_t> pair_counts;
    std::map<Pair, std::set<size_t>> pair_words;
    auto add_pairs = [&](size_t wi, int64_t sign) {
        const auto& seq = words[wi];
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            if (!can_merge[static_cast<size_t>(seq[i])] ||
                !can_merge[static_cast<size_t>(seq[i + 1])])
                continue;
            Pair p{seq[i], seq[i + 1]};
            pair_counts[p] += sign * counts[wi];
            if (sign > 0) pair_words[p].insert(wi);
        }
    };
    for (size_t wi = 0; wi < words.size(); ++wi) add_pairs(wi, +1);

    std::set<Pair> banned;  // pairs whose concatenation collides with an existing token
    while (model.size() < cfg.target_vocab_size) {
        int64_t best_count = 0;
        Pair best{-1, -1};
        for (const auto& [p, c] : pair_counts) {
            if (c <= 0 || banned.count(p)) continue;
            if (c > best_count) {
                best_count = c;
                best = p;
            } else if (c == best_count && best.first >= 0) {
                const auto& bl = syms[static_cast<size_t>(best.first)];
                const auto& br = syms[static_cast<size_t>(best.second)];
                const auto& pl = syms[static_cast<size_t>(p.first)];
                const auto& pr = syms[static_cast<size_t>(p.second)];
                if (std::tie(pl, pr) < std::tie(bl, br)) best = p;
            }
        }
        if (best.first < 0) break;

        const std::string left = syms[static_cast<size_t>(best.first)];
        const std::string right = syms[static_cast<size_t>(best.second)];
        const std::string token = left + right;
        if (model.id_of(token) >= 0) {
            banned.insert(best);
            continue;
        }
        model.add_token(token);
        model.add_merge(left, right);
        int32_t z = intern(token);
        if (static_cast<size_t>(z) >= can_merge.size()) can_merge.push_back(true);

        auto affected = pair_words[best];
        for (size_t wi : affected) {
            auto& seq = words[wi];
            bool hit = false;
            for (size_t i = 0; i + 1 < seq.size(); ++i)
                if (seq[i] == best.first && seq[i + 1] == best.second) {
                    hit = true;
                    break;
                }
            if (!hit) continue;
            add_pairs(wi, -1);
            std::vector<int32_t> next;
            next.reserve(seq.size());
            size_t i = 0;
            while (i < seq.size()) {
                if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
                    next.push_back(z);
                    i += 2;
                } else {
                    next.push_back(seq[i]);
                    ++i;
                }
            }
            seq = std::move(next);
            add_pairs(wi, +1);
        }
        pair_counts.erase(best);
        pair_words.erase(best);
    }
    return model;
}

// Metric definitions: compression = UTF-8 bytes of normalized text per
// token (no BOS/EOS); a "word" is a maximal run of non-U+0020 text;
// word-tokens are the tokens emitted for word pretokens.
inline TokenizerMetrics compute_metrics(const TokenizerModel& m,
                                        const std::vector<std::string>& corpus) {
    int64_t bytes = 0, tokens = 0, words = 0, word_tokens = 0;
    for (const std::string& text : corpus) {
        const std::string norm = unicode::normalize(text);
        bytes += static_cast<int64_t>(norm.size());
        bool in_word = false;
        const auto tagged = encode_tagged(m, norm);
        tokens += static_cast<int64_t>(tagged.size());
        for (const TaggedId& t : tagged) {
            if (t.kind == PretokenKind::space_run) {
                in_word = false;
                continue;
            }
            if (!in_word) {
                ++words;
                in_word = true;
            }
            if (t.kind == PretokenKind::word) ++word_tokens;
        }
    }
    if (bytes == 0) throw EmptyCorpus("compute_metrics: corpus has no bytes");
    TokenizerMetrics out;
    out.compression_rate = static_cast<double>(bytes) / static_cast<double>(tokens);
    out.fertility = words > 0 ? static_cast<double>(word_tokens) / static_cast<double>(words) : 0.0;
    out.continued_word_proportion =
        word_tokens > 0 ? static_cast<double>(word_tokens - words) / static_cast<double>(word_tokens)
                        : 0.0;
    return out;
}

namespace detail {

inline std::string escape_token(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '\\') out += "\\\\";
        else if (c == '\t') out += "\\t";
        else if (c == '\n') out += "\\n";
        else out.push_back(c);
    }
    return out;
}

inline std::string unescape_token(std::string_view s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\') {
            out.push_back(s[i]);
            continue;
        }
        if (i + 1 >= s.size()) throw Error("tokenizer file: dangling escape");
        ++i;
        if (s[i] == '\\') out.push_back('\\');
        else if (s[i] == 't') out.push_back('\t');
        else if (s[i] == 'n') out.push_back('\n');
        else throw Error(std::string("tokenizer file: bad escape \\") + s[i]);
    }
    return out;
}

}  // namespace detail

// `NYOTOK v1` text format: the vocab table, then the merge table, with
// \t, \n and \ escaped inside token fields. Implies NFC normalization.
inline void save_tokenizer(const TokenizerModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot write " + path);
    f << "NYOTOK v1\n";
    f << "vocab " << m.size() << "\n";
    for (int32_t i = 0; i < m.size(); ++i)
        f << i << "\t" << detail::escape_token(m.vocab[static_cast<size_t>(i)]) << "\n";
    f << "merges " << m.merges.size() << "\n";
    for (const auto& [l, r] : m.merges)
        f << detail::escape_token(l) << "\t" << detail::escape_token(r) << "\n";
    if (!f.good()) throw IoFailure("write failed: " + path);
}

inline TokenizerModel load_tokenizer(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot read " + path);
    std::string line;
    auto next_line = [&]() -> std::string& {
        if (!std::getline(f, line)) throw Error("tokenizer file truncated: " + path);
        return line;
    };
    if (next_line() != "NYOTOK v1") throw Error("not a NYOTOK v1 file: " + path);

    TokenizerModel m;
    auto parse_count = [&](const std::string& l, std::string_view tag) {
        if (l.rfind(tag, 0) != 0) throw Error("tokenizer file: expected '" + std::string(tag) + "'");
        return std::stoll(l.substr(tag.size() + 1));
    };
    const int64_t n = parse_count(next_line(), "vocab");
    m.vocab.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const std::string& l = next_line();
        auto tab = l.find('\t');
        if (tab == std::string::npos) throw Error("tokenizer file: bad vocab line");
        if (std::stoll(l.substr(0, tab)) != i) throw Error("tokenizer file: ids not dense");
        m.vocab.push_back(detail::unescape_token(l.substr(tab + 1)));
    }
    const int64_t nm = parse_count(next_line(), "merges");
    for (int64_t i = 0; i < nm; ++i) {
        const std::string& l = next_line();
        auto tab = l.find('\t');
        if (tab == std::string::npos) throw Error("tokenizer file: bad merge line");
        m.merges.emplace_back(detail::unescape_token(l.substr(0, tab)),
                              detail::unescape_token(l.substr(tab + 1)));
    }
    m.rebuild_index();

    // Structural checks: mandatory layout and merge closure.
    if (m.size() < kFirstLearnedId) throw Error("tokenizer file: vocab below mandatory size");
    TokenizerModel base = TokenizerModel::with_base_vocab();
    for (int32_t i = 0; i < kFirstLearnedId; ++i)
        if (m.vocab[static_cast<size_t>(i)] != base.vocab[static_cast<size_t>(i)])
            throw Error("tokenizer file: mandatory token layout mismatch at id " +
                        std::to_string(i));
    for (const auto& [l, r] : m.merges)
        if (m.id_of(l) < 0 || m.id_of(r) < 0 || m.id_of(l + r) < 0)
            throw Error("tokenizer file: merge references unknown token");
    return m;
}

}  // namespace nyoforge
