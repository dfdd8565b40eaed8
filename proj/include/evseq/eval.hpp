#pragma once
// Evaluation stage: frozen-embedding extraction, linear probing per task,
// hand-crafted count-feature baselines, the task suite report grid, and the
// packed-vs-padded throughput benchmark.

#include "evseq/probe.hpp"
#include "evseq/train.hpp"

#include <chrono>
#include <map>

namespace evseq {

enum class EmbedMode { usr, last_evt, concat };

inline const char* embed_mode_name(EmbedMode m) {
    switch (m) {
        case EmbedMode::usr: return "usr";
        case EmbedMode::last_evt: return "last_evt";
        case EmbedMode::concat: return "concat";
    }
    return "?";
}

struct EmbeddingMatrix {
    Tensor rows;                   // [n, d] or [n, 2d] for concat
    std::vector<std::string> ids;  // aligned with rows
    EmbedMode mode = EmbedMode::usr;
};

// Frozen deterministic forward over the given records. last_evt is the z_h row
// of the most recent event (events are stored time-ascending; timestamp ties
// resolve to the later storage row).
inline EmbeddingMatrix extract_embeddings(Model& model, const Store& store,
                                          const std::vector<std::string>& ids, EmbedMode mode,
                                          int64_t token_budget = 16384) {
    int64_t d = model.cfg.d_model;
    int64_t width = mode == EmbedMode::concat ? 2 * d : d;
    EmbeddingMatrix out;
    out.mode = mode;
    out.rows = Tensor({static_cast<int64_t>(ids.size()), width});
    std::map<std::string, int64_t> row_of;
    for (size_t i = 0; i < ids.size(); ++i) out.ids.push_back(ids[i]);
    for (size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = static_cast<int64_t>(i);

    for (const PackedBatch& batch : task_batches(store, ids, token_budget, /*seed=*/1)) {
        Graph g;
        ModelForward fwd = model.forward(g, batch);
        const Tensor& zh = g.value(fwd.zh);
        for (int64_t r = 0; r < batch.n_records(); ++r) {
            auto it = row_of.find(batch.record_ids[static_cast<size_t>(r)]);
            if (it == row_of.end()) continue;
            int64_t dst = it->second;
            int64_t usr_row = fwd.zh_usr_row[static_cast<size_t>(r)];
            int64_t last_evt_row = fwd.zh_evt_row[static_cast<size_t>(batch.record_offsets[r + 1] - 1)];
            if (mode == EmbedMode::usr) {
                for (int64_t c = 0; c < d; ++c) out.rows.at(dst, c) = zh.at(usr_row, c);
            } else if (mode == EmbedMode::last_evt) {
                for (int64_t c = 0; c < d; ++c) out.rows.at(dst, c) = zh.at(last_evt_row, c);
            } else {
                for (int64_t c = 0; c < d; ++c) {
                    out.rows.at(dst, c) = zh.at(usr_row, c);
                    out.rows.at(dst, d + c) = zh.at(last_evt_row, c);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probe pipeline per task: standardise on train, fit on train, score splits.

struct ProbeTaskResult {
    double train_metric = 0.0;
    double valid_metric = 0.0;
    double test_metric = 0.0;
    bool converged = false;
    ProbeResult probe;
    Standardizer scaler;
};

namespace eval_detail {

inline Tensor select_rows_by_id(const EmbeddingMatrix& em, const std::vector<std::string>& ids) {
    std::map<std::string, int64_t> row_of;
    for (size_t i = 0; i < em.ids.size(); ++i) row_of[em.ids[i]] = static_cast<int64_t>(i);
    Tensor out({static_cast<int64_t>(ids.size()), em.rows.cols()});
    for (size_t i = 0; i < ids.size(); ++i) {
        int64_t src = row_of.at(ids[i]);
        for (int64_t c = 0; c < em.rows.cols(); ++c)
            out.at(static_cast<int64_t>(i), c) = em.rows.at(src, c);
    }
    return out;
}

inline double split_metric(const TaskDataset& ds, const TaskDataset::SplitData& split,
                           const ProbeResult& probe, const Standardizer& scaler,
                           const Tensor& raw_features) {
    Tensor x = scaler.apply(raw_features);
    if (ds.task == Task::product_rec) {
        std::vector<std::vector<double>> scores(static_cast<size_t>(x.rows()));
        for (int64_t i = 0; i < x.rows(); ++i)
            scores[static_cast<size_t>(i)].resize(static_cast<size_t>(probe.n_outputs));
        for (int c = 0; c < probe.n_outputs; ++c) {
            auto col = logistic_scores(probe, x, c);
            for (int64_t i = 0; i < x.rows(); ++i)
                scores[static_cast<size_t>(i)][static_cast<size_t>(c)] = col[static_cast<size_t>(i)];
        }
        auto m = mean_ap(scores, split.bitsets);
        return m ? *m : 0.5;
    }
    auto scores = logistic_scores(probe, x);
    auto m = roc_auc(scores, split.labels);
    return m ? *m : 0.5;
}

} // namespace eval_detail

// Fit on the train split only; standardisation statistics come from the train
// split only (leakage guard).
inline ProbeTaskResult probe_task(const EmbeddingMatrix& em, const TaskDataset& ds,
                                  double l2 = 1e-3) {
    using namespace eval_detail;
    ProbeTaskResult out;
    Tensor train_x_raw = select_rows_by_id(em, ds.train.ids);
    out.scaler = Standardizer::fit(train_x_raw);
    Tensor train_x = out.scaler.apply(train_x_raw);

    if (ds.task == Task::product_rec) {
        out.probe = fit_multilabel(train_x, ds.train.bitsets, l2);
    } else {
        out.probe = fit_logistic(train_x, ds.train.labels, l2);
    }
    out.converged = out.probe.converged;
    out.train_metric = split_metric(ds, ds.train, out.probe, out.scaler, train_x_raw);
    out.valid_metric = split_metric(ds, ds.valid, out.probe, out.scaler,
                                    select_rows_by_id(em, ds.valid.ids));
    out.test_metric = split_metric(ds, ds.test, out.probe, out.scaler,
                                   select_rows_by_id(em, ds.test.ids));
    return out;
}

// ---------------------------------------------------------------------------
// Reference baseline: logistic regression on hand-crafted count features.

inline std::vector<double> baseline_feature_row(const UserRecord& rec) {
    std::vector<double> f;
    double counts[4] = {0, 0, 0, 0};
    std::vector<double> amount_hist(12, 0.0);
    for (const auto& e : rec.events) {
        counts[static_cast<int>(e.source)] += 1.0;
        if (e.source == SourceType::transaction) {
            std::string amt = e.field("Amount");
            if (!amt.empty()) {
                double a = std::stod(amt);
                int bin = a <= 0 ? 0
                                 : std::min(11, static_cast<int>(std::floor(std::log2(1.0 + a))));
                amount_hist[static_cast<size_t>(bin)] += 1.0;
            }
        }
    }
    for (double c : counts) f.push_back(std::log1p(c));
    for (double h : amount_hist) f.push_back(std::log1p(h));
    double days_since_last =
        rec.events.empty()
            ? 0.0
            : static_cast<double>(rec.evaluation_point - rec.events.back().timestamp) / 86400.0;
    f.push_back(days_since_last);
    f.push_back(std::log1p(static_cast<double>(rec.events.size())));
    return f;
}

inline EmbeddingMatrix baseline_features(const std::vector<UserRecord>& records) {
    EmbeddingMatrix em;
    if (records.empty()) throw InvariantError("baseline: no records");
    auto first = baseline_feature_row(records[0]);
    em.rows = Tensor({static_cast<int64_t>(records.size()), static_cast<int64_t>(first.size())});
    for (size_t i = 0; i < records.size(); ++i) {
        em.ids.push_back(records[i].record_id);
        auto row = baseline_feature_row(records[i]);
        for (size_t c = 0; c < row.size(); ++c)
            em.rows.at(static_cast<int64_t>(i), static_cast<int64_t>(c)) = row[c];
    }
    return em;
}

// ---------------------------------------------------------------------------
// Task suite: grid of {baseline, probe, lora} x tasks with relative deltas.

struct MetricReport {
    std::string task;
    std::string arm;     // baseline | probe | lora
    std::string metric;  // roc_auc or map
    double value = 0.0;
    double relative_to_baseline = 0.0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["task"] = task;
        j["arm"] = arm;
        j["metric"] = metric;
        j["value"] = value;
        j["relative_to_baseline"] = relative_to_baseline;
        return j;
    }
};

struct SuiteConfig {
    std::vector<Task> tasks = all_tasks();
    bool run_lora = true;
    EmbedMode probe_mode = EmbedMode::usr;
    AdaptConfig adapt;
    int64_t token_budget = 16384;
};

inline std::vector<MetricReport> run_task_suite(Model& pretrained, const Store& store,
                                                const std::map<std::string, LabelSet>& labels,
                                                const std::vector<UserRecord>& raw_records,
                                                const SuiteConfig& cfg) {
    std::vector<MetricReport> reports;
    EmbeddingMatrix base_em = baseline_features(raw_records);
    std::vector<std::string> all_ids;
    for (const auto& e : store.index().entries()) all_ids.push_back(e.record_id);
    EmbeddingMatrix em = extract_embeddings(pretrained, store, all_ids, cfg.probe_mode,
                                            cfg.token_budget);

    for (Task task : cfg.tasks) {
        TaskDataset ds = build_task_dataset(store, labels, task);
        const char* metric_name = task == Task::product_rec ? "map" : "roc_auc";

        ProbeTaskResult base = probe_task(base_em, ds);
        reports.push_back({task_name(task), "baseline", metric_name, base.test_metric, 0.0});

        ProbeTaskResult probe = probe_task(em, ds);
        reports.push_back({task_name(task), "probe", metric_name, probe.test_metric,
                           relative_to_baseline(probe.test_metric, base.test_metric)});

        if (cfg.run_lora) {
            Model tuned = pretrained.clone();  // fresh adapters per task
            AdaptResult lora = lora_finetune(tuned, store, ds, labels, cfg.adapt);
            reports.push_back({task_name(task), "lora", metric_name, lora.test_metric,
                               relative_to_baseline(lora.test_metric, base.test_metric)});
        }
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Throughput benchmark: packed+dynamic vs padded event-stage forward.

struct BenchResult {
    double packed_tokens_per_sec = 0.0;
    double padded_tokens_per_sec = 0.0;
    double speedup = 0.0;
    double pad_fraction = 0.0;           // measured on padded buffers
    double pad_fraction_analytic = 0.0;  // from the batch plan offsets
    int64_t batches = 0;
    int trials = 0;
    bool unstable = false;  // fewer than 100 batches per trial
    std::string length_distribution;
};

// Synthetic tokenised corpus with controlled event-token length distribution.
inline void build_bench_store(const std::string& dir, int64_t n_records, double sigma,
                              uint64_t seed, int64_t vocab_hint = 64) {
    StoreBuilder builder(dir);
    Rng rng(seed);
    for (int64_t i = 0; i < n_records; ++i) {
        TokenisedRecord rec;
        char id[16];
        snprintf(id, sizeof(id), "b%06lld", static_cast<long long>(i));
        rec.record_id = id;
        rec.profile.push_back({5, 13, 0});
        rec.profile_times.push_back(0.0);
        int64_t n_events = 6 + static_cast<int64_t>(rng.uniform_u64(6));
        for (int64_t e = 0; e < n_events; ++e) {
            TokenisedEvent ev;
            ev.timestamp = 1000000 + e * 1000;
            ev.log_dt = static_cast<double>(n_events - 1 - e) * 3.0;
            ev.cal = {1.0, 2.0, 3.0};
            int64_t len = sigma <= 0.0
                              ? 8
                              : std::clamp<int64_t>(
                                    static_cast<int64_t>(rng.lognormal(std::log(6.0), sigma)), 1, 24);
            for (int64_t t = 0; t < len; ++t)
                ev.triples.push_back({static_cast<int32_t>(5 + rng.uniform_u64(8)),
                                      static_cast<int32_t>(13 + rng.uniform_u64(vocab_hint - 13)),
                                      static_cast<int16_t>(t % 8)});
            rec.events.push_back(std::move(ev));
        }
        builder.add(std::move(rec));
    }
    builder.finalize();
}

inline BenchResult throughput_bench(Model& model, const Store& store, int64_t token_budget,
                                    int trials = 5, const std::string& dist_label = "") {
    BenchResult res;
    res.trials = trials;
    res.length_distribution = dist_label;

    BatchPlan plan;
    plan.token_budget = token_budget;
    plan.seed = 3;
    Loader loader(store, plan);
    std::vector<PackedBatch> batches;
    loader.run_epoch(0, [&](PackedBatch&& b) { batches.push_back(std::move(b)); });
    res.batches = static_cast<int64_t>(batches.size());
    if (res.batches < 100) res.unstable = true;

    int64_t real_tokens = 0, padded_cells = 0, pad_cells = 0;
    for (const auto& b : batches) {
        real_tokens += b.n_event_tokens();
        PaddedBatch p = padded_batch(b, static_cast<int32_t>(Vocab::kPad));
        padded_cells += p.n_events * p.max_len;
        pad_cells += p.pad_cells;
        // analytic ratio from the plan offsets alone
        int64_t max_len = 0;
        for (int64_t e = 0; e < b.n_events(); ++e)
            max_len = std::max(max_len, b.event_offsets[e + 1] - b.event_offsets[e]);
        res.pad_fraction_analytic += static_cast<double>(max_len * b.n_events() - b.n_event_tokens());
    }
    res.pad_fraction = static_cast<double>(pad_cells) / static_cast<double>(padded_cells);
    res.pad_fraction_analytic /= static_cast<double>(padded_cells);

    // full forwards; the two paths differ only in the event stage
    auto run_packed = [&]() {
        for (const auto& b : batches) {
            Graph g;
            model.forward(g, b);
        }
    };
    auto run_padded = [&]() {
        for (const auto& b : batches) {
            Graph g;
            model.forward(g, b, false, nullptr, nullptr, nullptr, /*padded_events=*/true);
        }
    };

    std::vector<double> packed_times, padded_times;
    run_packed();  // warmup, excluded
    for (int t = 0; t < trials; ++t) {
        auto t0 = std::chrono::steady_clock::now();
        run_packed();
        packed_times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                   .count());
    }
    run_padded();  // warmup
    for (int t = 0; t < trials; ++t) {
        auto t0 = std::chrono::steady_clock::now();
        run_padded();
        padded_times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                   .count());
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    double packed_t = median(packed_times);
    double padded_t = median(padded_times);
    res.packed_tokens_per_sec = static_cast<double>(real_tokens) / packed_t;
    res.padded_tokens_per_sec = static_cast<double>(real_tokens) / padded_t;
    res.speedup = res.packed_tokens_per_sec / res.padded_tokens_per_sec;
    return res;
}

} // namespace evseq
