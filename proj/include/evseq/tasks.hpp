#pragma once
// Task datasets: store records joined with planted labels, split by the
// deterministic id hash, and packed into reusable batches for heads, probes,
// and fine-tuning.

#include "evseq/corpus.hpp"
#include "evseq/loader.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace evseq {

struct TaskDataset {
    Task task = Task::recurrent;
    int n_outputs = 1;  // 1 binary logit or K independent product logits

    struct SplitData {
        std::vector<std::string> ids;
        std::vector<int> labels;                  // binary tasks
        std::vector<std::vector<int>> bitsets;    // multilabel tasks
    };
    SplitData train, valid, test;

    const SplitData& split(Split s) const {
        switch (s) {
            case Split::train: return train;
            case Split::valid: return valid;
            case Split::test: return test;
        }
        return train;
    }
};

inline TaskDataset build_task_dataset(const Store& store,
                                      const std::map<std::string, LabelSet>& labels, Task task) {
    TaskDataset ds;
    ds.task = task;
    for (const auto& entry : store.index().entries()) {
        auto it = labels.find(entry.record_id);
        if (it == labels.end()) throw InvariantError("missing labels for record " + entry.record_id);
        TaskDataset::SplitData* split = nullptr;
        switch (split_of(entry.record_id)) {
            case Split::train: split = &ds.train; break;
            case Split::valid: split = &ds.valid; break;
            case Split::test: split = &ds.test; break;
        }
        split->ids.push_back(entry.record_id);
        if (task == Task::product_rec) {
            std::vector<int> bits(it->second.product_rec.begin(), it->second.product_rec.end());
            ds.n_outputs = static_cast<int>(bits.size());
            split->bitsets.push_back(std::move(bits));
        } else {
            split->labels.push_back(it->second.binary(task));
        }
    }
    if (ds.train.ids.empty()) throw InvariantError("task dataset: empty train split");
    return ds;
}

// Pack every record whose id is in `subset` into budgeted batches, shard by
// shard. Grouping is deterministic in (seed); batches are materialised once
// and reused across epochs.
inline std::vector<PackedBatch> task_batches(const Store& store,
                                             const std::vector<std::string>& subset,
                                             int64_t token_budget, uint64_t seed) {
    std::set<std::string> wanted(subset.begin(), subset.end());
    std::vector<PackedBatch> out;
    Rng rng(seed ^ 0x7a5cULL);
    for (const auto& info : store.shards()) {
        ShardData shard = store.load(info);
        std::vector<int64_t> indices;
        for (int64_t r = 0; r < shard.n_records(); ++r)
            if (wanted.count(shard.record_ids[static_cast<size_t>(r)])) indices.push_back(r);
        if (indices.empty()) continue;
        rng.shuffle(indices);
        std::vector<int64_t> footprints;
        footprints.reserve(indices.size());
        for (int64_t r : indices) {
            const UserIndexEntry* e = store.index().find(shard.record_ids[static_cast<size_t>(r)]);
            footprints.push_back(e->footprint());
        }
        for (const BatchGroup& g : dynamic_batch(footprints, token_budget)) {
            std::vector<int64_t> group(indices.begin() + g.begin, indices.begin() + g.end);
            PackedBatch b = pack(shard, group, store.index());
            b.over_budget = g.over_budget;
            out.push_back(std::move(b));
        }
    }
    return out;
}

} // namespace evseq
