#pragma once

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nyoforge/corpus.hpp"
#include "nyoforge/errors.hpp"
#include "nyoforge/rng.hpp"

namespace nyoforge {

enum class ExhaustionPolicy { renormalize, stop };

struct SchedulerConfig {
    int context_len = 128;
    int batch_size = 8;  // sequences per batch
    uint64_t seed = 0;   // governs worker reshuffle and record shuffle
    int num_workers = 1;
    ExhaustionPolicy policy = ExhaustionPolicy::renormalize;
    bool record_shuffle = true;  // per-file seeded record permutation
};

// Fixed-length sequence assembled from one or more document slices.
// doc_boundaries() lists the offsets where a document ends inside this
// sequence (cu_seqlens style); a slice that continues into the next
// sequence contributes a segment but no boundary.
struct PackedSequence {
    struct Segment {
        std::string dataset;
        int32_t length = 0;
        bool ends_doc = false;
    };
    std::vector<int32_t> tokens;  // length == context_len after padding
    std::vector<Segment> segments;
    int32_t pad_count = 0;

    int32_t content_len() const {
        return static_cast<int32_t>(tokens.size()) - pad_count;
    }
    std::vector<int32_t> doc_boundaries() const {
        std::vector<int32_t> out;
        int32_t off = 0;
        for (const auto& s : segments) {
            off += s.length;
            if (s.ends_doc) out.push_back(off);
        }
        return out;
    }
    std::vector<std::string> sources() const {
        std::vector<std::string> out;
        for (const auto& s : segments) out.push_back(s.dataset);
        return out;
    }
};

struct TokenBatch {
    std::vector<PackedSequence> sequences;
    std::map<std::string, int64_t> source_token_counts;  // non-pad tokens
    uint64_t first_sequence_index = 0;
    uint64_t end_sequence_index = 0;
};

struct StreamCheckpoint {
    int version = 1;
    std::map<std::string, std::set<std::string>> completed;  // dataset -> files
    std::array<uint64_t, 4> mux_rng{};
    uint64_t shuffle_seed = 0;
};

inline void save_stream_checkpoint(const StreamCheckpoint& c, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot write " + path);
    f << "NYOSTREAM v1\n";
    for (const auto& [dataset, files] : c.completed) {
        f << "dataset " << dataset << " " << files.size() << "\n";
        for (const auto& file : files) f << file << "\n";
    }
    char hex[65];
    for (int i = 0; i < 4; ++i)
        std::snprintf(hex + i * 16, 17, "%016llx",
                      static_cast<unsigned long long>(c.mux_rng[static_cast<size_t>(i)]));
    f << "mux_rng " << hex << "\n";
    f << "shuffle_seed " << c.shuffle_seed << "\n";
    if (!f.good()) throw IoFailure("write failed: " + path);
}

inline StreamCheckpoint load_stream_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != "NYOSTREAM v1")
        throw SchemaMismatch("not a NYOSTREAM v1 file: " + path);
    StreamCheckpoint c;
    bool have_rng = false, have_seed = false;
    while (std::getline(f, line)) {
        if (line.rfind("dataset ", 0) == 0) {
            const auto sp = line.rfind(' ');
            const std::string name = line.substr(8, sp - 8);
            const int64_t n = std::stoll(line.substr(sp + 1));
            auto& files = c.completed[name];
            for (int64_t i = 0; i < n; ++i) {
                if (!std::getline(f, line)) throw SchemaMismatch("truncated dataset block");
                files.insert(line);
            }
        } else if (line.rfind("mux_rng ", 0) == 0) {
            const std::string hex = line.substr(8);
            if (hex.size() != 64) throw SchemaMismatch("mux_rng must be 32 bytes of hex");
            for (int i = 0; i < 4; ++i)
                c.mux_rng[static_cast<size_t>(i)] =
                    std::stoull(hex.substr(static_cast<size_t>(i) * 16, 16), nullptr, 16);
            have_rng = true;
        } else if (line.rfind("shuffle_seed ", 0) == 0) {
            c.shuffle_seed = std::stoull(line.substr(13));
            have_seed = true;
        } else if (!line.empty()) {
            throw SchemaMismatch("unrecognized checkpoint line: " + line);
        }
    }
    if (!have_rng || !have_seed) throw SchemaMismatch("checkpoint missing mux_rng/shuffle_seed");
    return c;
}

namespace detail {

// Sequential reader over one worker's file list for one dataset. A file
// is reported completed exactly when its last document is emitted;
// files with no usable records complete as they are encountered.
class WorkerDocStream {
public:
    WorkerDocStream(const TokenizerModel& tok, std::string dataset,
                    std::vector<std::string> files, uint64_t seed, bool record_shuffle,
                    const std::set<std::string>* skip, ReadStats* stats)
        : tok_(tok),
          dataset_(std::move(dataset)),
          files_(std::move(files)),
          seed_(seed),
          record_shuffle_(record_shuffle),
          stats_(stats) {
        if (skip) {
            std::erase_if(files_, [&](const std::string& f) { return skip->count(f) > 0; });
        }
    }

    bool has_next() {
        while (pending_.empty()) {
            if (next_file_ >= files_.size()) return false;
            load_file(files_[next_file_++]);
        }
        return true;
    }

    std::optional<Document> next() {
        if (!has_next()) return std::nullopt;
        Document d = std::move(pending_.front());
        pending_.pop_front();
        if (pending_.empty()) completed_.push_back(current_file_);
        return d;
    }

    std::vector<std::string> take_completed() {
        return std::exchange(completed_, {});
    }

private:
    void load_file(const std::string& file) {
        auto docs = read_documents(tok_, file, dataset_, stats_);
        if (docs.empty()) {
            completed_.push_back(file);  // nothing to emit
            return;
        }
        if (record_shuffle_) {
            Rng rng(mix_seed(seed_, "records/" + file));
            shuffle(docs, rng);
        }
        current_file_ = file;
        pending_.assign(std::make_move_iterator(docs.begin()),
                        std::make_move_iterator(docs.end()));
    }

    const TokenizerModel& tok_;
    std::string dataset_;
    std::vector<std::string> files_;
    uint64_t seed_;
    bool record_shuffle_;
    ReadStats* stats_;
    size_t next_file_ = 0;
    std::string current_file_;
    std::deque<Document> pending_;
    std::vector<std::string> completed_;
};

// One dataset's merged document stream: round-robin over its workers.
class DatasetStream {
public:
    bool has_next() {
        for (auto& w : workers)
            if (w.has_next()) return true;
        return false;
    }

    std::optional<Document> next() {
        for (size_t tries = 0; tries < workers.size(); ++tries) {
            auto& w = workers[cursor];
            cursor = (cursor + 1) % workers.size();
            if (w.has_next()) return w.next();
        }
        return std::nullopt;
    }

    std::vector<WorkerDocStream> workers;
    size_t cursor = 0;
};

}  // namespace detail

// Rolling token buffer implementing content stuffing: sequences are
// emitted whenever context_len tokens accumulate; documents split across
// consecutive sequences rather than truncate; PAD only at stream tail.
class Packer {
public:
    explicit Packer(int context_len) : context_len_(context_len) {
        if (context_len < 2) throw BadConfig("context_len must be >= 2");
    }

    void push(Document doc) {
        buffered_ += static_cast<int64_t>(doc.tokens.size());
        queue_.push_back({std::move(doc.dataset), std::move(doc.tokens), 0});
    }

    bool has_full() const { return buffered_ >= context_len_; }

    PackedSequence pop_full() { return assemble(context_len_); }

    // Final partial sequence, padded; empty optional when nothing is buffered.
    std::optional<PackedSequence> flush() {
        if (buffered_ == 0) return std::nullopt;
        auto seq = assemble(static_cast<int32_t>(buffered_));
        seq.pad_count = context_len_ - static_cast<int32_t>(seq.tokens.size());
        seq.tokens.resize(static_cast<size_t>(context_len_), kPadId);
        return seq;
    }

    int64_t buffered_tokens() const { return buffered_; }

private:
    struct Slice {
        std::string dataset;
        std::vector<int32_t> tokens;
        size_t off;
    };

    PackedSequence assemble(int32_t want) {
        PackedSequence seq;
        seq.tokens.reserve(static_cast<size_t>(want));
        while (want > 0) {
            Slice& s = queue_.front();
            const int32_t avail = static_cast<int32_t>(s.tokens.size() - s.off);
            const int32_t take = std::min(avail, want);
            seq.tokens.insert(seq.tokens.end(),
                              s.tokens.begin() + static_cast<ptrdiff_t>(s.off),
                              s.tokens.begin() + static_cast<ptrdiff_t>(s.off + static_cast<size_t>(take)));
            s.off += static_cast<size_t>(take);
            const bool ends = s.off == s.tokens.size();
            seq.segments.push_back({s.dataset, take, ends});
            if (ends) queue_.pop_front();
            want -= take;
            buffered_ -= take;
        }
        return seq;
    }

    int32_t context_len_;
    std::deque<Slice> queue_;
    int64_t buffered_ = 0;
};

struct StreamStats {
    ReadStats read;
    bool stopped_on_exhaustion = false;  // policy stop fired
};

// Stage 3 orchestrator for one rank: multiplexes per-dataset worker
// streams by weight, stuffs documents into fixed-length sequences, and
// groups them into batches. Checkpoints are valid between batches.
class StreamScheduler {
public:
    StreamScheduler(TokenizerModel tok, const StreamPlan& plan, int rank,
                    const SchedulerConfig& cfg, const StreamCheckpoint* resume = nullptr)
        : tok_(std::move(tok)), cfg_(cfg), packer_(cfg.context_len), shuffle_seed_(cfg.seed) {
        if (cfg.batch_size < 1) throw BadConfig("batch_size must be >= 1");
        if (resume) {
            if (resume->version != 1) throw SchemaMismatch("unsupported checkpoint version");
            for (const auto& [dataset, files] : resume->completed)
                for (const auto& f : files)
                    if (!plan.contains(dataset, f))
                        throw PlanMismatch("checkpoint file not in plan: " + dataset + "/" + f);
            shuffle_seed_ = resume->shuffle_seed;
            mux_rng_ = Rng::from_state(resume->mux_rng);
            completed_ = resume->completed;
        } else {
            mux_rng_ = Rng(mix_seed(cfg.seed, "mux", static_cast<uint64_t>(rank)));
        }

        SchedulerConfig eff = cfg;
        eff.seed = shuffle_seed_;
        auto workers = worker_split(plan, rank, eff.num_workers);
        for (size_t di = 0; di < plan.datasets.size(); ++di) {
            const auto& d = plan.datasets[di];
            names_.push_back(d.dataset);
            weights_.push_back(d.weight);
            exhausted_.push_back(false);
            const std::set<std::string>* skip = nullptr;
            if (auto it = completed_.find(d.dataset); it != completed_.end()) skip = &it->second;
            detail::DatasetStream ds;
            for (int w = 0; w < eff.num_workers; ++w)
                ds.workers.emplace_back(tok_, d.dataset,
                                        workers[static_cast<size_t>(w)].per_dataset[di].second,
                                        mix_seed(shuffle_seed_, d.dataset, static_cast<uint64_t>(rank)),
                                        eff.record_shuffle, skip, &stats_.read);
            streams_.push_back(std::move(ds));
        }
    }

    // Manual re-weight hook; takes effect on the next draw.
    void set_weights(const std::map<std::string, double>& weights) {
        for (size_t i = 0; i < names_.size(); ++i)
            if (auto it = weights.find(names_[i]); it != weights.end()) {
                if (it->second < 0) throw BadConfig("weights must be non-negative");
                weights_[i] = it->second;
            }
    }

    std::optional<TokenBatch> next_batch() {
        TokenBatch batch;
        batch.first_sequence_index = sequence_index_;
        while (static_cast<int>(batch.sequences.size()) < cfg_.batch_size) {
            auto seq = next_sequence();
            if (!seq) break;
            for (const auto& s : seq->segments)
                batch.source_token_counts[s.dataset] += s.length;
            batch.sequences.push_back(std::move(*seq));
        }
        if (batch.sequences.empty()) return std::nullopt;
        sequence_index_ += batch.sequences.size();
        batch.end_sequence_index = sequence_index_;
        return batch;
    }

    // One categorical draw over the active normalized weights. Exhaustion
    // is marked by lookahead, never by a failed draw, so the rng advances
    // exactly once per emitted document. Datasets with zero weight are
    // unreachable by construction and do not keep the stream alive.
    std::pair<Document, std::string> draw_document() {
        double active_weight = 0.0;
        for (size_t i = 0; i < streams_.size(); ++i) {
            if (!exhausted_[i] && !streams_[i].has_next()) exhausted_[i] = true;
            if (!exhausted_[i]) active_weight += weights_[i];
        }
        if (cfg_.policy == ExhaustionPolicy::stop) {
            for (size_t i = 0; i < streams_.size(); ++i)
                if (exhausted_[i]) throw StreamStopped("dataset '" + names_[i] + "' exhausted");
        }
        if (active_weight <= 0.0) throw AllExhausted("no active dataset stream");
        const double u = mux_rng_.uniform() * active_weight;
        double cum = 0.0;
        size_t pick = streams_.size();
        for (size_t i = 0; i < streams_.size(); ++i) {
            if (exhausted_[i] || weights_[i] <= 0.0) continue;
            cum += weights_[i];
            if (u < cum) {
                pick = i;
                break;
            }
        }
        if (pick == streams_.size()) {  // fp edge at u == cum
            for (size_t i = streams_.size(); i-- > 0;)
                if (!exhausted_[i] && weights_[i] > 0.0) {
                    pick = i;
                    break;
                }
        }
        auto doc = streams_[pick].next();
        collect_completed();
        return {std::move(*doc), names_[pick]};
    }

    // Valid between next_batch() calls.
    StreamCheckpoint checkpoint() {
        collect_completed();
        StreamCheckpoint c;
        c.completed = completed_;
        for (const auto& name : names_) c.completed.try_emplace(name);  // keep empty blocks
        c.mux_rng = mux_rng_.state();
        c.shuffle_seed = shuffle_seed_;
        return c;
    }

    const StreamStats& stats() const { return stats_; }

private:
    std::optional<PackedSequence> next_sequence() {
        while (!packer_.has_full()) {
            auto doc = mux_next();
            if (!doc) {
                if (!flushed_) {
                    flushed_ = true;
                    return packer_.flush();
                }
                return std::nullopt;
            }
            packer_.push(std::move(*doc));
        }
        return packer_.pop_full();
    }

    std::optional<Document> mux_next() {
        if (flushed_ || stats_.stopped_on_exhaustion) return std::nullopt;
        try {
            return draw_document().first;
        } catch (const AllExhausted&) {
            return std::nullopt;
        } catch (const StreamStopped&) {
            stats_.stopped_on_exhaustion = true;
            return std::nullopt;
        }
    }

    void collect_completed() {
        for (size_t i = 0; i < streams_.size(); ++i)
            for (auto& w : streams_[i].workers)
                for (auto& f : w.take_completed()) completed_[names_[i]].insert(f);
    }

    TokenizerModel tok_;
    SchedulerConfig cfg_;
    Packer packer_;
    uint64_t shuffle_seed_;
    Rng mux_rng_;
    std::vector<std::string> names_;
    std::vector<double> weights_;
    std::vector<bool> exhausted_;
    std::vector<detail::DatasetStream> streams_;
    std::map<std::string, std::set<std::string>> completed_;
    StreamStats stats_;
    uint64_t sequence_index_ = 0;
    bool flushed_ = false;
};

}  // namespace nyoforge
