#pragma once
// Dynamic token-budget batching and flat-buffer sequence packing. Batches
// never mix shards, so exact shards stay rectangular along the event axis;
// the token axis is packed via offsets and attention never crosses an event
// boundary. A padded rectangular path exists as the equivalence and
// throughput baseline.

#include "evseq/store.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

namespace evseq {

struct PackedBatch {
    // flat event-token buffers
    std::vector<int32_t> key_ids, value_ids;
    std::vector<int16_t> positions;
    std::vector<int64_t> event_offsets;   // n_events + 1, prefix sums over tokens
    std::vector<int64_t> record_offsets;  // n_records + 1, prefix sums over events
    std::vector<double> event_log_dt, event_hour, event_dow, event_dom;

    // per-record profile block
    std::vector<int32_t> prof_key_ids, prof_value_ids;
    std::vector<int16_t> prof_positions;
    std::vector<int64_t> prof_offsets;    // n_records + 1, prefix sums over profile tokens
    std::vector<double> prof_times;

    std::vector<std::string> record_ids;

    // mask scaffolding: one directive slot per flat event-token position,
    // filled by the masking stage (0 = keep)
    std::vector<uint8_t> mask_directives;

    bool over_budget = false;
    bool bin_padded = false;  // from a binned shard: event counts may vary

    int64_t n_records() const { return static_cast<int64_t>(record_ids.size()); }
    int64_t n_events() const { return record_offsets.empty() ? 0 : record_offsets.back(); }
    int64_t n_event_tokens() const { return event_offsets.empty() ? 0 : event_offsets.back(); }
    int64_t n_profile_tokens() const { return prof_offsets.empty() ? 0 : prof_offsets.back(); }
    int64_t total_tokens() const { return n_event_tokens() + n_profile_tokens(); }
};

struct BatchPlan {
    int64_t token_budget = 32768;
    uint64_t seed = 0;
    int workers = 1;
    int queue_depth = 4;
};

struct BatchGroup {
    int64_t begin = 0, end = 0;  // record index range within the shard order
    bool over_budget = false;
};

// Greedy accumulation in stream order: emit when the next record would blow
// the budget; a record alone above budget is emitted solo and flagged.
inline std::vector<BatchGroup> dynamic_batch(const std::vector<int64_t>& footprints,
                                             int64_t budget) {
    std::vector<BatchGroup> groups;
    int64_t begin = 0, acc = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(footprints.size()); ++i) {
        if (footprints[i] > budget) {
            if (acc > 0) groups.push_back({begin, i, false});
            groups.push_back({i, i + 1, true});
            begin = i + 1;
            acc = 0;
            continue;
        }
        if (acc + footprints[i] > budget) {
            groups.push_back({begin, i, false});
            begin = i;
            acc = 0;
        }
        acc += footprints[i];
    }
    if (begin < static_cast<int64_t>(footprints.size()))
        groups.push_back({begin, static_cast<int64_t>(footprints.size()), false});
    return groups;
}

// Pack a group of records (indices into one shard, any order) plus their
// profile blocks from the index.
inline PackedBatch pack(const ShardData& shard, const std::vector<int64_t>& rec_indices,
                        const UserIndex& index) {
    PackedBatch b;
    b.event_offsets.push_back(0);
    b.record_offsets.push_back(0);
    b.prof_offsets.push_back(0);
    b.bin_padded = !shard.key.exact();
    for (int64_t r : rec_indices) {
        b.record_ids.push_back(shard.record_ids[static_cast<size_t>(r)]);
        for (int64_t e = shard.rec_event_offsets[r]; e < shard.rec_event_offsets[r + 1]; ++e) {
            for (int64_t t = shard.event_token_offsets[e]; t < shard.event_token_offsets[e + 1]; ++t) {
                b.key_ids.push_back(shard.key_ids[static_cast<size_t>(t)]);
                b.value_ids.push_back(shard.value_ids[static_cast<size_t>(t)]);
                b.positions.push_back(shard.positions[static_cast<size_t>(t)]);
            }
            b.event_offsets.push_back(static_cast<int64_t>(b.key_ids.size()));
            b.event_log_dt.push_back(shard.event_log_dt[static_cast<size_t>(e)]);
            b.event_hour.push_back(shard.event_hour[static_cast<size_t>(e)]);
            b.event_dow.push_back(shard.event_dow[static_cast<size_t>(e)]);
            b.event_dom.push_back(shard.event_dom[static_cast<size_t>(e)]);
        }
        b.record_offsets.push_back(static_cast<int64_t>(b.event_log_dt.size()));

        const UserIndexEntry* entry = index.find(shard.record_ids[static_cast<size_t>(r)]);
        if (!entry) throw InvariantError("pack: record missing from index: " +
                                         shard.record_ids[static_cast<size_t>(r)]);
        for (size_t i = 0; i < entry->profile.size(); ++i) {
            b.prof_key_ids.push_back(entry->profile[i].key_id);
            b.prof_value_ids.push_back(entry->profile[i].value_id);
            b.prof_positions.push_back(entry->profile[i].pos);
            b.prof_times.push_back(entry->profile_times[i]);
        }
        b.prof_offsets.push_back(static_cast<int64_t>(b.prof_key_ids.size()));
    }
    b.mask_directives.assign(static_cast<size_t>(b.n_event_tokens()), 0);
    return b;
}

// Inverse of pack for round-trip checks: rebuilds per-record token structure.
inline std::vector<TokenisedRecord> unpack(const PackedBatch& b) {
    std::vector<TokenisedRecord> out;
    for (int64_t r = 0; r < b.n_records(); ++r) {
        TokenisedRecord rec;
        rec.record_id = b.record_ids[static_cast<size_t>(r)];
        for (int64_t p = b.prof_offsets[r]; p < b.prof_offsets[r + 1]; ++p) {
            rec.profile.push_back({b.prof_key_ids[static_cast<size_t>(p)],
                                   b.prof_value_ids[static_cast<size_t>(p)],
                                   b.prof_positions[static_cast<size_t>(p)]});
            rec.profile_times.push_back(b.prof_times[static_cast<size_t>(p)]);
        }
        for (int64_t e = b.record_offsets[r]; e < b.record_offsets[r + 1]; ++e) {
            TokenisedEvent ev;
            ev.log_dt = b.event_log_dt[static_cast<size_t>(e)];
            ev.cal = {b.event_hour[static_cast<size_t>(e)], b.event_dow[static_cast<size_t>(e)],
                      b.event_dom[static_cast<size_t>(e)]};
            for (int64_t t = b.event_offsets[e]; t < b.event_offsets[e + 1]; ++t)
                ev.triples.push_back({b.key_ids[static_cast<size_t>(t)],
                                      b.value_ids[static_cast<size_t>(t)],
                                      b.positions[static_cast<size_t>(t)]});
            rec.events.push_back(std::move(ev));
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// Rectangular reference layout: every event padded to the group max with PAD.
struct PaddedBatch {
    int64_t n_events = 0;
    int64_t max_len = 0;
    std::vector<int32_t> key_ids, value_ids;  // n_events * max_len
    std::vector<int16_t> positions;
    std::vector<uint8_t> valid;               // attention mask
    int64_t pad_cells = 0;
};

inline PaddedBatch padded_batch(const PackedBatch& b, int32_t pad_id) {
    PaddedBatch p;
    p.n_events = b.n_events();
    for (int64_t e = 0; e < p.n_events; ++e)
        p.max_len = std::max(p.max_len, b.event_offsets[e + 1] - b.event_offsets[e]);
    p.key_ids.assign(static_cast<size_t>(p.n_events * p.max_len), pad_id);
    p.value_ids.assign(static_cast<size_t>(p.n_events * p.max_len), pad_id);
    p.positions.assign(static_cast<size_t>(p.n_events * p.max_len), 0);
    p.valid.assign(static_cast<size_t>(p.n_events * p.max_len), 0);
    for (int64_t e = 0; e < p.n_events; ++e) {
        int64_t len = b.event_offsets[e + 1] - b.event_offsets[e];
        for (int64_t t = 0; t < len; ++t) {
            size_t dst = static_cast<size_t>(e * p.max_len + t);
            size_t src = static_cast<size_t>(b.event_offsets[e] + t);
            p.key_ids[dst] = b.key_ids[src];
            p.value_ids[dst] = b.value_ids[src];
            p.positions[dst] = b.positions[src];
            p.valid[dst] = 1;
        }
        p.pad_cells += p.max_len - len;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Epoch iteration: shards visited in seeded random order, records shuffled
// within each shard, then greedy-batched and packed.

class Loader {
public:
    Loader(const Store& store, BatchPlan plan) : store_(&store), plan_(plan) {
        int64_t max_fp = 0;
        for (const auto& e : store.index().entries()) max_fp = std::max(max_fp, e.footprint());
        if (max_fp > plan_.token_budget && plan_.token_budget > 0) {
            // permitted: those records travel as flagged singletons
        }
    }

    // Deterministic single-threaded epoch in shuffled order.
    void run_epoch(uint64_t epoch_seed, const std::function<void(PackedBatch&&)>& sink) const {
        std::vector<size_t> shard_order = shuffled_shard_order(epoch_seed);
        for (size_t si : shard_order) emit_shard(si, epoch_seed, sink);
    }

    // Threaded epoch: workers own disjoint shard subsets and feed a bounded
    // queue; batch order interleaves nondeterministically but coverage holds.
    void run_epoch_threaded(uint64_t epoch_seed,
                            const std::function<void(PackedBatch&&)>& sink) const {
        int workers = std::max(1, plan_.workers);
        if (workers == 1) {
            run_epoch(epoch_seed, sink);
            return;
        }
        struct Queue {
            std::mutex m;
            std::condition_variable cv_push, cv_pop;
            std::deque<PackedBatch> q;
            size_t cap;
            int open_producers;
            explicit Queue(size_t c, int p) : cap(c), open_producers(p) {}
            void push(PackedBatch&& b) {
                std::unique_lock lk(m);
                cv_push.wait(lk, [&] { return q.size() < cap; });
                q.push_back(std::move(b));
                cv_pop.notify_one();
            }
            bool pop(PackedBatch& out) {
                std::unique_lock lk(m);
                cv_pop.wait(lk, [&] { return !q.empty() || open_producers == 0; });
                if (q.empty()) return false;
                out = std::move(q.front());
                q.pop_front();
                cv_push.notify_one();
                return true;
            }
            void producer_done() {
                std::lock_guard lk(m);
                --open_producers;
                cv_pop.notify_all();
            }
        } queue(static_cast<size_t>(std::max(1, plan_.queue_depth)), workers);

        std::vector<size_t> shard_order = shuffled_shard_order(epoch_seed);
        std::vector<std::thread> threads;
        for (int w = 0; w < workers; ++w) {
            threads.emplace_back([&, w] {
                for (size_t i = static_cast<size_t>(w); i < shard_order.size();
                     i += static_cast<size_t>(workers))
                    emit_shard(shard_order[i], epoch_seed,
                               [&](PackedBatch&& b) { queue.push(std::move(b)); });
                queue.producer_done();
            });
        }
        PackedBatch b;
        while (queue.pop(b)) sink(std::move(b));
        for (auto& t : threads) t.join();
    }

private:
    const Store* store_;
    BatchPlan plan_;

    std::vector<size_t> shuffled_shard_order(uint64_t epoch_seed) const {
        std::vector<size_t> order(store_->shards().size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng = Rng(plan_.seed).fork(epoch_seed ^ 0x5e0cull);
        rng.shuffle(order);
        return order;
    }

    void emit_shard(size_t si, uint64_t epoch_seed,
                    const std::function<void(PackedBatch&&)>& sink) const {
        ShardData shard = store_->load(store_->shards()[si]);
        std::vector<int64_t> rec_order(static_cast<size_t>(shard.n_records()));
        for (size_t i = 0; i < rec_order.size(); ++i) rec_order[i] = static_cast<int64_t>(i);
        Rng rng = Rng(plan_.seed).fork(epoch_seed * 1315423911ULL + si + 1);
        rng.shuffle(rec_order);

        std::vector<int64_t> footprints;
        footprints.reserve(rec_order.size());
        for (int64_t r : rec_order) {
            const UserIndexEntry* e = store_->index().find(shard.record_ids[static_cast<size_t>(r)]);
            if (!e) throw InvariantError("loader: record missing from index");
            footprints.push_back(e->footprint());
        }
        for (const BatchGroup& g : dynamic_batch(footprints, plan_.token_budget)) {
            std::vector<int64_t> group(rec_order.begin() + g.begin, rec_order.begin() + g.end);
            PackedBatch batch = pack(shard, group, store_->index());
            batch.over_budget = g.over_budget;
            sink(std::move(batch));
        }
    }
};

} // namespace evseq
