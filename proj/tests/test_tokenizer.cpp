#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "nyoforge/rng.hpp"
#include "nyoforge/tokenizer.hpp"

using namespace nyoforge;

namespace {

// Brute-force BPE trainer: recounts every adjacent pair from scratch at
// each step and picks (max count, lexicographically smallest pair).
// Independent of the incremental implementation under test.
struct NaiveBpe {
    std::vector<std::string> alphabet;
    std::vector<std::pair<std::string, std::string>> merges;

    static NaiveBpe train(const std::vector<std::string>& corpus, int max_merges) {
        NaiveBpe out;
        std::map<std::string, int64_t> word_counts;
        for (const auto& text : corpus)
            for (const auto& p : pretokenize(unicode::normalize(text)))
                if (p.kind == PretokenKind::word) ++word_counts[p.text];

        std::map<std::string, int64_t> char_freq;
        std::vector<std::pair<std::vector<std::string>, int64_t>> words;
        for (const auto& [w, c] : word_counts) {
            auto syms = detail::split_chars(w);
            for (const auto& s : syms) char_freq[s] += c;
            words.push_back({syms, c});
        }
        std::vector<std::pair<std::string, int64_t>> alpha(char_freq.begin(), char_freq.end());
        std::sort(alpha.begin(), alpha.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second > b.second : a.first < b.first;
        });
        for (const auto& [ch, f] : alpha) out.alphabet.push_back(ch);

        for (int step = 0; step < max_merges; ++step) {
            std::map<std::pair<std::string, std::string>, int64_t> counts;
            for (const auto& [syms, c] : words)
                for (size_t i = 0; i + 1 < syms.size(); ++i)
                    counts[{syms[i], syms[i + 1]}] += c;
            std::pair<std::string, std::string> best;
            int64_t best_count = 0;
            for (const auto& [p, c] : counts)
                if (c > best_count) { best = p; best_count = c; }
                // std::map iterates keys ascending, so the first maximum
                // seen is already the lexicographically smallest pair.
            if (best_count == 0) break;
            out.merges.push_back(best);
            for (auto& [syms, c] : words) {
                std::vector<std::string> next;
                size_t i = 0;
                while (i < syms.size()) {
                    if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
                        next.push_back(best.first + best.second);
                        i += 2;
                    } else {
                        next.push_back(syms[i]);
                        ++i;
                    }
                }
                syms = std::move(next);
            }
        }
        return out;
    }
};

int32_t target_for(const NaiveBpe& oracle, int n_merges) {
    return kFirstLearnedId + static_cast<int32_t>(oracle.alphabet.size()) + n_merges;
}

std::string fuzz_string(Rng& rng) {
    std::string s;
    const int len = static_cast<int>(rng.bounded(60));
    for (int k = 0; k < len; ++k) {
        switch (rng.bounded(8)) {
            case 0: s.append(std::string(1 + rng.bounded(40), ' ')); break;
            case 1: s.push_back(static_cast<char>('0' + rng.bounded(10))); break;
            case 2: unicode::append_utf8(s, 0x4E00 + static_cast<uint32_t>(rng.bounded(0x100))); break;
            case 3: unicode::append_utf8(s, 0xC0 + static_cast<uint32_t>(rng.bounded(0x100))); break;
            case 4: unicode::append_utf8(s, 0x300 + static_cast<uint32_t>(rng.bounded(0x20))); break;
            case 5: s.push_back(static_cast<char>(rng.bounded(256))); break;  // raw byte, may be invalid
            case 6: unicode::append_utf8(s, 0x1F600 + static_cast<uint32_t>(rng.bounded(0x30))); break;
            default:
                for (int i = 0; i < 5; ++i) s.push_back(static_cast<char>('a' + rng.bounded(26)));
        }
    }
    return s;
}

const std::vector<std::string> kTinyCorpus = {
    "the quick brown fox jumps over the lazy dog",
    "pack my box with five dozen liquor jugs",
    "sphinx of black quartz judge my vow",
};

}  // namespace

TEST_CASE("pretokenize tags words digits and space runs", "[tokenizer]") {
    auto toks = pretokenize("ab 12");
    REQUIRE(toks.size() == 4);
    CHECK(toks[0].kind == PretokenKind::word);
    CHECK(toks[0].text == "ab");
    CHECK(toks[1].kind == PretokenKind::space_run);
    CHECK(toks[1].text == " ");
    CHECK(toks[2].kind == PretokenKind::digit);
    CHECK(toks[2].text == "1");
    CHECK(toks[3].kind == PretokenKind::digit);
    CHECK(toks[3].text == "2");

    CHECK(pretokenize("").empty());

    auto runs = pretokenize(std::string(30, ' '));
    REQUIRE(runs.size() == 2);
    CHECK(runs[0].text == std::string(24, ' '));
    CHECK(runs[1].text == std::string(6, ' '));
}

TEST_CASE("pretokenize surfaces concatenate to the input", "[tokenizer]") {
    Rng rng(99);
    for (int iter = 0; iter < 300; ++iter) {
        std::string s = unicode::normalize(fuzz_string(rng));
        std::string cat;
        for (const auto& p : pretokenize(s)) {
            cat += p.text;
            if (p.kind == PretokenKind::digit) {
                CHECK(p.text.size() == 1);
                CHECK(std::isdigit(static_cast<unsigned char>(p.text[0])));
            }
            if (p.kind == PretokenKind::space_run) {
                CHECK(p.text.size() >= 1);
                CHECK(p.text.size() <= 24);
                CHECK(p.text.find_first_not_of(' ') == std::string::npos);
            }
            if (p.kind == PretokenKind::word) {
                CHECK(p.text.find(' ') == std::string::npos);
                for (char c : p.text) CHECK(!std::isdigit(static_cast<unsigned char>(c)));
            }
        }
        CHECK(cat == s);
    }
}

TEST_CASE("first merge maximizes pair frequency", "[tokenizer]") {
    // "abab": (a,b) occurs twice, (b,a) once
    auto oracle = NaiveBpe::train({"abab"}, 1);
    REQUIRE(oracle.merges.size() == 1);
    CHECK(oracle.merges[0] == std::make_pair(std::string("a"), std::string("b")));

    auto m = train_bpe({"abab"}, {target_for(oracle, 1)});
    REQUIRE(m.merges.size() == 1);
    CHECK(m.merges[0] == oracle.merges[0]);
}

TEST_CASE("digit-only corpus learns zero merges", "[tokenizer]") {
    auto m = train_bpe({"123 456 789 123"}, {400});
    CHECK(m.merges.empty());
    CHECK(m.size() == kFirstLearnedId);
}

TEST_CASE("ties break to the lexicographically smaller pair", "[tokenizer]") {
    // "abcabc": (a,b) 2, (b,c) 2, (c,a) 1 -> (a,b) first
    auto oracle = NaiveBpe::train({"abcabc"}, 2);
    REQUIRE(oracle.merges.size() == 2);
    CHECK(oracle.merges[0] == std::make_pair(std::string("a"), std::string("b")));

    auto m = train_bpe({"abcabc"}, {target_for(oracle, 2)});
    REQUIRE(m.merges.size() >= 1);
    CHECK(m.merges[0] == std::make_pair(std::string("a"), std::string("b")));
}

TEST_CASE("merge sequence matches the exhaustive recount oracle", "[tokenizer]") {
    // < 1 kB corpus, recount-from-scratch oracle replayed merge by merge
    auto oracle = NaiveBpe::train(kTinyCorpus, 40);
    auto m = train_bpe(kTinyCorpus, {target_for(oracle, 40)});
    REQUIRE(m.merges.size() == oracle.merges.size());
    for (size_t i = 0; i < oracle.merges.size(); ++i) {
        INFO("merge " << i);
        CHECK(m.merges[i] == oracle.merges[i]);
    }
}

TEST_CASE("training is deterministic down to the serialized bytes", "[tokenizer]") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "nyotok_det";
    fs::create_directories(dir);
    auto read_all = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    save_tokenizer(train_bpe(kTinyCorpus, {360}), (dir / "a.tok").string());
    save_tokenizer(train_bpe(kTinyCorpus, {360}), (dir / "b.tok").string());
    CHECK(read_all(dir / "a.tok") == read_all(dir / "b.tok"));
    fs::remove_all(dir);
}

TEST_CASE("digits encode one token each", "[tokenizer]") {
    auto m = train_bpe(kTinyCorpus, {360});
    auto ids = encode(m, "2024");
    REQUIRE(ids.size() == 4);
    CHECK(ids[0] == kDigitBase + 2);
    CHECK(ids[1] == kDigitBase + 0);
    CHECK(ids[2] == kDigitBase + 2);
    CHECK(ids[3] == kDigitBase + 4);
}

TEST_CASE("space runs encode as single special tokens", "[tokenizer]") {
    auto m = TokenizerModel::with_base_vocab();
    auto ids = encode(m, "    ");
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == kSpaceRunBase + 3);

    // n spaces -> floor(n/24) full runs plus one remainder token
    for (int n = 1; n <= 100; ++n) {
        auto got = encode(m, std::string(static_cast<size_t>(n), ' '));
        const int full = n / 24, rem = n % 24;
        REQUIRE(got.size() == static_cast<size_t>(full + (rem > 0 ? 1 : 0)));
        for (int i = 0; i < full; ++i) CHECK(got[static_cast<size_t>(i)] == kSpaceRunBase + 23);
        if (rem > 0) CHECK(got.back() == kSpaceRunBase + rem - 1);
    }
}

TEST_CASE("bos/eos flag wraps the sequence", "[tokenizer]") {
    auto m = TokenizerModel::with_base_vocab();
    auto ids = encode(m, "7", true);
    REQUIRE(ids.size() == 3);
    CHECK(ids.front() == kBosId);
    CHECK(ids[1] == kDigitBase + 7);
    CHECK(ids.back() == kEosId);
}

TEST_CASE("decode inverts encode up to normalization", "[tokenizer]") {
    auto m = train_bpe(kTinyCorpus, {360});
    CHECK(decode(m, std::vector<int32_t>{}) == "");
    CHECK(decode(m, std::vector<int32_t>{kPadId, kPadId, kPadId}) == "");
    CHECK(decode(m, encode(m, "héllo  wörld", true)) ==
          unicode::normalize("héllo  wörld"));
    CHECK_THROWS_AS(decode(m, std::vector<int32_t>{m.size()}), IdOutOfRange);
    CHECK_THROWS_AS(decode(m, std::vector<int32_t>{-1}), IdOutOfRange);
}

TEST_CASE("round-trip and digit atomicity under fuzz", "[tokenizer]") {
    auto m = train_bpe(kTinyCorpus, {400});
    Rng rng(31337);
    for (int iter = 0; iter < 1000; ++iter) {
        const std::string s = fuzz_string(rng);
        auto ids = encode(m, s);
        CHECK(decode(m, ids) == unicode::normalize(s));
        for (int32_t id : ids) {
            const std::string surf = m.surface(id);
            bool has_digit = false;
            for (char c : surf) has_digit |= (c >= '0' && c <= '9');
            if (has_digit) CHECK(surf.size() == 1);
        }
    }
}

TEST_CASE("unknown characters fall back to bytes", "[tokenizer]") {
    auto m = train_bpe({"plain ascii only"}, {320});
    auto ids = encode(m, "☃");  // snowman: 3 UTF-8 bytes, not in vocab
    REQUIRE(ids.size() == 3);
    for (int32_t id : ids) CHECK(TokenizerModel::is_byte(id));
    CHECK(decode(m, ids) == "☃");
}

TEST_CASE("training errors", "[tokenizer]") {
    CHECK_THROWS_AS(train_bpe({}, {512}), EmptyCorpus);
    CHECK_THROWS_AS(train_bpe({"abc"}, {kFirstLearnedId - 1}), TargetTooSmall);
}

TEST_CASE("base vocab satisfies the structural invariants", "[tokenizer]") {
    auto m = TokenizerModel::with_base_vocab();
    REQUIRE(m.size() == kFirstLearnedId);
    std::set<std::string> uniq(m.vocab.begin(), m.vocab.end());
    CHECK(uniq.size() == m.vocab.size());
    for (int n = 1; n <= 24; ++n)
        CHECK(m.vocab[static_cast<size_t>(kSpaceRunBase + n - 1)] == std::string(static_cast<size_t>(n), ' '));
    for (int d = 0; d < 10; ++d)
        CHECK(m.vocab[static_cast<size_t>(kDigitBase + d)] == std::string(1, static_cast<char>('0' + d)));
}

TEST_CASE("metrics on the worked micro corpus", "[tokenizer]") {
    // "aa aa" with "aa" a learned token: [aa][space][aa]
    auto oracle = NaiveBpe::train({"aa aa"}, 1);
    auto m = train_bpe({"aa aa"}, {target_for(oracle, 1)});
    REQUIRE(encode(m, "aa aa").size() == 3);

    auto metrics = compute_metrics(m, {"aa aa"});
    CHECK(metrics.compression_rate == Catch::Approx(5.0 / 3.0).epsilon(1e-12));
    CHECK(metrics.fertility == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(metrics.continued_word_proportion == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("metrics definitional cases", "[tokenizer]") {
    // every word split into exactly two tokens -> fertility 2, continued 0.5
    auto m = train_bpe({"xy xy xy"}, {kFirstLearnedId + 2});
    REQUIRE(m.merges.empty());
    auto two = compute_metrics(m, {"xy xy xy"});
    CHECK(two.fertility == Catch::Approx(2.0));
    CHECK(two.continued_word_proportion == Catch::Approx(0.5));

    auto one = compute_metrics(m, {"x"});
    CHECK(one.fertility == Catch::Approx(1.0));

    CHECK_THROWS_AS(compute_metrics(m, {""}), EmptyCorpus);
}

TEST_CASE("serialization round-trips and validates", "[tokenizer]") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "nyotok_ser";
    fs::create_directories(dir);
    const auto path = (dir / "m.tok").string();

    auto m = train_bpe(kTinyCorpus, {360});
    save_tokenizer(m, path);
    auto back = load_tokenizer(path);
    CHECK(back.vocab == m.vocab);
    CHECK(back.merges == m.merges);
    CHECK(encode(back, "the quick 12  fox") == encode(m, "the quick 12  fox"));

    std::ofstream bad(dir / "bad.tok");
    bad << "NOTATOK v9\n";
    bad.close();
    CHECK_THROWS_AS(load_tokenizer((dir / "bad.tok").string()), Error);
    CHECK_THROWS_AS(load_tokenizer((dir / "missing.tok").string()), IoFailure);
    fs::remove_all(dir);
}

TEST_CASE("token field escaping round-trips", "[tokenizer]") {
    for (std::string s : {"a\tb", "a\nb", "a\\b", "\\t", "plain", "\t\n\\"}) {
        CHECK(detail::unescape_token(detail::escape_token(s)) == s);
    }
    CHECK(detail::escape_token("a\tb") == "a\\tb");
    CHECK_THROWS_AS(detail::unescape_token("bad\\"), Error);
    CHECK_THROWS_AS(detail::unescape_token("bad\\x"), Error);
}
