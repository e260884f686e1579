#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nyoforge/errors.hpp"
#include "nyoforge/rng.hpp"
#include "nyoforge/tokenizer.hpp"

namespace nyoforge {

struct DatasetSpec {
    std::string name;
    std::string root;
    double weight = 1.0;
    std::string file_glob = "*.jsonl";
};

// fnmatch-style matching with * ? and [...] classes; * crosses '/' so a
// glob like "shard*/part-?.jsonl" works against root-relative paths.
inline bool glob_match(std::string_view pattern, std::string_view path) {
    size_t p = 0, s = 0, star_p = std::string_view::npos, star_s = 0;
    while (s < path.size()) {
        bool matched = false;
        if (p < pattern.size()) {
            const char pc = pattern[p];
            if (pc == '*') {
                star_p = ++p;
                star_s = s;
                continue;
            }
            if (pc == '?') {
                ++p;
                ++s;
                continue;
            }
            if (pc == '[') {
                size_t q = p + 1;
                bool negate = q < pattern.size() && (pattern[q] == '!' || pattern[q] == '^');
                if (negate) ++q;
                bool in = false;
                bool first = true;
                while (q < pattern.size() && (pattern[q] != ']' || first)) {
                    if (q + 2 < pattern.size() && pattern[q + 1] == '-' && pattern[q + 2] != ']') {
                        if (pattern[q] <= path[s] && path[s] <= pattern[q + 2]) in = true;
                        q += 3;
                    } else {
                        if (pattern[q] == path[s]) in = true;
                        ++q;
                    }
                    first = false;
                }
                if (q < pattern.size() && in != negate) {
                    p = q + 1;
                    ++s;
                    continue;
                }
            } else if (pc == path[s]) {
                ++p;
                ++s;
                matched = true;
            }
        }
        if (matched) continue;
        if (star_p != std::string_view::npos) {
            p = star_p;
            s = ++star_s;
            continue;
        }
        return false;
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

struct StreamPlan {
    uint64_t seed = 0;
    int world_size = 1;
    struct DatasetFiles {
        std::string dataset;
        double weight = 1.0;
        std::vector<std::string> files;  // shuffled order; file i -> rank i % world_size
    };
    std::vector<DatasetFiles> datasets;

    std::vector<std::string> files_for(const std::string& dataset, int rank) const {
        for (const auto& d : datasets) {
            if (d.dataset != dataset) continue;
            std::vector<std::string> out;
            for (size_t i = 0; i < d.files.size(); ++i)
                if (static_cast<int>(i % static_cast<size_t>(world_size)) == rank)
                    out.push_back(d.files[i]);
            return out;
        }
        return {};
    }

    bool contains(const std::string& dataset, const std::string& file) const {
        for (const auto& d : datasets)
            if (d.dataset == dataset)
                return std::find(d.files.begin(), d.files.end(), file) != d.files.end();
        return false;
    }
};

// Stage 1: enumerate files per dataset, shuffle with a per-dataset seed,
// assign round-robin across ranks.
inline StreamPlan plan_stream(const std::vector<DatasetSpec>& specs, uint64_t seed,
                              int world_size) {
    namespace fs = std::filesystem;
    if (world_size < 1) throw BadConfig("world_size must be >= 1");
    StreamPlan plan;
    plan.seed = seed;
    plan.world_size = world_size;
    for (const auto& spec : specs) {
        StreamPlan::DatasetFiles df;
        df.dataset = spec.name;
        df.weight = spec.weight;
        std::error_code ec;
        for (fs::recursive_directory_iterator it(spec.root, ec), end; it != end && !ec;
             it.increment(ec)) {
            if (!it->is_regular_file()) continue;
            const std::string rel = fs::relative(it->path(), spec.root).generic_string();
            if (glob_match(spec.file_glob, rel)) df.files.push_back(it->path().string());
        }
        if (df.files.empty())
            throw NoFilesMatched("dataset '" + spec.name + "': no files match '" +
                                 spec.file_glob + "' under " + spec.root);
        std::sort(df.files.begin(), df.files.end());
        Rng rng(mix_seed(seed, "plan/" + spec.name));
        shuffle(df.files, rng);
        plan.datasets.push_back(std::move(df));
    }
    return plan;
}

struct WorkerFiles {
    // per dataset (plan order): the files this worker reads, in order
    std::vector<std::pair<std::string, std::vector<std::string>>> per_dataset;
};

// Stage 2 split: the rank's files are reshuffled with a per-(dataset,
// rank) seed, then worker j takes positions congruent to j.
inline std::vector<WorkerFiles> worker_split(const StreamPlan& plan, int rank, int num_workers) {
    if (rank < 0 || rank >= plan.world_size)
        throw RankOutOfRange("rank " + std::to_string(rank) + " of " +
                             std::to_string(plan.world_size));
    if (num_workers < 1) throw BadConfig("num_workers must be >= 1");
    std::vector<WorkerFiles> workers(static_cast<size_t>(num_workers));
    for (const auto& d : plan.datasets) {
        auto files = plan.files_for(d.dataset, rank);
        Rng rng(mix_seed(plan.seed, "worker/" + d.dataset, static_cast<uint64_t>(rank)));
        shuffle(files, rng);
        for (int w = 0; w < num_workers; ++w) {
            std::vector<std::string> mine;
            for (size_t i = static_cast<size_t>(w); i < files.size();
                 i += static_cast<size_t>(num_workers))
                mine.push_back(files[i]);
            workers[static_cast<size_t>(w)].per_dataset.emplace_back(d.dataset, std::move(mine));
        }
    }
    return workers;
}

struct Document {
    std::string dataset;
    std::string file;
    int64_t index_in_file = 0;
    std::vector<int32_t> tokens;  // non-empty, EOS-terminated
};

struct ReadStats {
    int64_t records = 0;
    int64_t malformed = 0;
    int64_t empty_skipped = 0;
};

// Stage 2 reader: one JSONL record per line with a required "text"
// field. Malformed lines and empty texts are counted and skipped so a
// long run never dies on one bad record.
inline std::vector<Document> read_documents(const TokenizerModel& tokenizer,
                                            const std::string& file, const std::string& dataset,
                                            ReadStats* stats = nullptr) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw IoFailure("cannot read " + file);
    std::vector<Document> docs;
    ReadStats local;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ++local.records;
        std::string text;
        try {
            auto j = nlohmann::json::parse(line);
            if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
                throw Error("missing text field");
            text = j["text"].get<std::string>();
        } catch (const std::exception&) {
            ++local.malformed;
            continue;
        }
        if (text.empty()) {
            ++local.empty_skipped;
            continue;
        }
        Document d;
        d.dataset = dataset;
        d.file = file;
        d.index_in_file = static_cast<int64_t>(docs.size());
        d.tokens = encode(tokenizer, text, /*add_bos_eos=*/false);
        d.tokens.push_back(kEosId);
        docs.push_back(std::move(d));
    }
    if (stats) {
        stats->records += local.records;
        stats->malformed += local.malformed;
        stats->empty_skipped += local.empty_skipped;
    }
    return docs;
}

}  // namespace nyoforge
