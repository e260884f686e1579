#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "nyoforge/corpus.hpp"

using namespace nyoforge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("nyocorpus_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_jsonl(const fs::path& p, const std::vector<std::string>& texts) {
    std::ofstream f(p);
    for (const auto& t : texts) f << nlohmann::json{{"text", t}} << "\n";
}

void make_files(const fs::path& root, int n, int docs_per_file = 2) {
    for (int i = 0; i < n; ++i) {
        std::vector<std::string> texts;
        for (int d = 0; d < docs_per_file; ++d)
            texts.push_back("file" + std::to_string(i) + " doc" + std::to_string(d));
        char name[32];
        std::snprintf(name, sizeof name, "f%02d.jsonl", i);
        write_jsonl(root / name, texts);
    }
}

}  // namespace

TEST_CASE("glob matching", "[corpus]") {
    CHECK(glob_match("*.jsonl", "a.jsonl"));
    CHECK(glob_match("*.jsonl", "sub/a.jsonl"));
    CHECK(!glob_match("*.jsonl", "a.json"));
    CHECK(glob_match("f??.jsonl", "f01.jsonl"));
    CHECK(!glob_match("f??.jsonl", "f1.jsonl"));
    CHECK(glob_match("f[0-2]x", "f1x"));
    CHECK(!glob_match("f[0-2]x", "f3x"));
    CHECK(glob_match("f[!0-2]x", "f3x"));
    CHECK(glob_match("*", "anything/at/all"));
    CHECK(glob_match("shard*/part-?.jsonl", "shard12/part-3.jsonl"));
}

TEST_CASE("plan assigns files round-robin with balanced counts", "[corpus]") {
    TempDir tmp("plan");
    make_files(tmp.path, 10);
    DatasetSpec spec{"d", tmp.path.string(), 1.0, "*.jsonl"};

    auto plan = plan_stream({spec}, 42, 4);
    REQUIRE(plan.datasets.size() == 1);
    REQUIRE(plan.datasets[0].files.size() == 10);

    // round-robin oracle: rank r receives positions r, r+4, r+8, ...
    std::multiset<size_t> counts;
    std::set<std::string> seen;
    for (int r = 0; r < 4; ++r) {
        auto files = plan.files_for("d", r);
        counts.insert(files.size());
        for (size_t i = 0; i < files.size(); ++i) {
            CHECK(plan.datasets[0].files[i * 4 + static_cast<size_t>(r)] == files[i]);
            seen.insert(files[i]);
        }
    }
    CHECK(counts == std::multiset<size_t>{3, 3, 2, 2});
    CHECK(seen.size() == 10);  // every file assigned to exactly one rank
}

TEST_CASE("world_size 1 puts every file on rank 0", "[corpus]") {
    TempDir tmp("w1");
    make_files(tmp.path, 5);
    auto plan = plan_stream({{"d", tmp.path.string(), 1.0, "*.jsonl"}}, 7, 1);
    CHECK(plan.files_for("d", 0).size() == 5);
}

TEST_CASE("planning is deterministic and seed-sensitive", "[corpus]") {
    TempDir tmp("det");
    make_files(tmp.path, 8);
    DatasetSpec spec{"d", tmp.path.string(), 1.0, "*.jsonl"};
    auto a = plan_stream({spec}, 42, 2);
    auto b = plan_stream({spec}, 42, 2);
    CHECK(a.datasets[0].files == b.datasets[0].files);
    auto c = plan_stream({spec}, 43, 2);
    CHECK(a.datasets[0].files != c.datasets[0].files);
}

TEST_CASE("no files matched is an error", "[corpus]") {
    TempDir tmp("nofiles");
    CHECK_THROWS_AS(plan_stream({{"d", tmp.path.string(), 1.0, "*.jsonl"}}, 1, 1),
                    NoFilesMatched);
}

TEST_CASE("worker split partitions the rank's files", "[corpus]") {
    TempDir tmp("split");
    make_files(tmp.path, 5);
    auto plan = plan_stream({{"d", tmp.path.string(), 1.0, "*.jsonl"}}, 11, 1);

    auto solo = worker_split(plan, 0, 1);
    REQUIRE(solo.size() == 1);
    REQUIRE(solo[0].per_dataset.size() == 1);
    CHECK(solo[0].per_dataset[0].second.size() == 5);

    auto two = worker_split(plan, 0, 2);
    REQUIRE(two.size() == 2);
    std::multiset<size_t> sizes{two[0].per_dataset[0].second.size(),
                                two[1].per_dataset[0].second.size()};
    CHECK(sizes == std::multiset<size_t>{3, 2});

    // union == rank list, disjoint
    std::set<std::string> seen;
    for (const auto& w : two)
        for (const auto& f : w.per_dataset[0].second) CHECK(seen.insert(f).second);
    auto rank_files = plan.files_for("d", 0);
    CHECK(seen == std::set<std::string>(rank_files.begin(), rank_files.end()));

    CHECK_THROWS_AS(worker_split(plan, 1, 1), RankOutOfRange);
    CHECK_THROWS_AS(worker_split(plan, -1, 1), RankOutOfRange);
}

TEST_CASE("coverage: every file read exactly once per epoch", "[corpus]") {
    TempDir tmp("cover");
    make_files(tmp.path, 13);
    auto plan = plan_stream({{"d", tmp.path.string(), 1.0, "*.jsonl"}}, 5, 3);
    std::map<std::string, int> times;
    for (int r = 0; r < 3; ++r)
        for (const auto& w : worker_split(plan, r, 2))
            for (const auto& [ds, files] : w.per_dataset)
                for (const auto& f : files) ++times[f];
    CHECK(times.size() == 13);
    for (const auto& [f, n] : times) CHECK(n == 1);
}

TEST_CASE("changing world_size preserves the file union", "[corpus]") {
    TempDir tmp("rebalance");
    make_files(tmp.path, 9);
    DatasetSpec spec{"d", tmp.path.string(), 1.0, "*.jsonl"};
    for (int ws : {1, 2, 4}) {
        auto plan = plan_stream({spec}, 99, ws);
        std::set<std::string> all;
        for (int r = 0; r < ws; ++r) {
            auto files = plan.files_for("d", r);
            all.insert(files.begin(), files.end());
        }
        CHECK(all.size() == 9);
    }
}

TEST_CASE("documents come out in file order, tokenized with EOS", "[corpus]") {
    TempDir tmp("read");
    write_jsonl(tmp.path / "a.jsonl", {"one", "two", "three"});
    auto tok = TokenizerModel::with_base_vocab();

    auto docs = read_documents(tok, (tmp.path / "a.jsonl").string(), "d");
    REQUIRE(docs.size() == 3);
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(docs[static_cast<size_t>(i)].index_in_file == i);
        CHECK(docs[static_cast<size_t>(i)].dataset == "d");
        REQUIRE(!docs[static_cast<size_t>(i)].tokens.empty());
        CHECK(docs[static_cast<size_t>(i)].tokens.back() == kEosId);
    }
}

TEST_CASE("digit record tokenizes to digit ids plus EOS", "[corpus]") {
    TempDir tmp("digits");
    write_jsonl(tmp.path / "a.jsonl", {"2024"});
    auto tok = TokenizerModel::with_base_vocab();
    auto docs = read_documents(tok, (tmp.path / "a.jsonl").string(), "d");
    REQUIRE(docs.size() == 1);
    std::vector<int32_t> want{kDigitBase + 2, kDigitBase + 0, kDigitBase + 2, kDigitBase + 4,
                              kEosId};
    CHECK(docs[0].tokens == want);
}

TEST_CASE("empty and malformed records are counted and skipped", "[corpus]") {
    TempDir tmp("bad");
    {
        std::ofstream f(tmp.path / "a.jsonl");
        f << nlohmann::json{{"text", "good one"}} << "\n";
        f << nlohmann::json{{"text", ""}} << "\n";          // empty -> skipped
        f << "{not json at all\n";                           // malformed
        f << nlohmann::json{{"meta", 1}} << "\n";           // missing text
        f << nlohmann::json{{"text", 42}} << "\n";          // wrong type
        f << nlohmann::json{{"text", "good two"}} << "\n";
    }
    auto tok = TokenizerModel::with_base_vocab();
    ReadStats stats;
    auto docs = read_documents(tok, (tmp.path / "a.jsonl").string(), "d", &stats);
    REQUIRE(docs.size() == 2);
    CHECK(docs[0].index_in_file == 0);
    CHECK(docs[1].index_in_file == 1);
    CHECK(stats.records == 6);
    CHECK(stats.malformed == 3);
    CHECK(stats.empty_skipped == 1);

    CHECK_THROWS_AS(read_documents(tok, (tmp.path / "missing.jsonl").string(), "d"), IoFailure);
}
