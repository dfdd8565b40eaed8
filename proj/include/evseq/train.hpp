#pragma once
// Pre-training and adaptation loops.
//
// Masking unions three independent passes over the packed event tokens:
// per-token Bernoulli(0.15), per-event Bernoulli(0.10) covering all of the
// event's tokens, and per-key Bernoulli(0.10) over each record's distinct
// keys covering that key's value tokens. A fraction of selected positions is
// corrupted to [UNK] instead of [MASK] and excluded from the loss, so those
// positions receive no reconstruction gradient. Event-pass selections mask
// the key ids as well; other selections keep the key visible. Profile tokens
// are never masked.

#include "evseq/metrics.hpp"
#include "evseq/model.hpp"
#include "evseq/tasks.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <set>

namespace evseq {

// ---------------------------------------------------------------------------
// Masking

enum class Directive : uint8_t { keep = 0, mask = 1, unk = 2 };

struct MaskRates {
    double token = 0.15;
    double event = 0.10;
    double key = 0.10;
    double unk_fraction = 0.10;

    void validate() const {
        for (double p : {token, event, key, unk_fraction})
            if (p < 0.0 || p > 1.0) throw ConfigError("mask rate outside [0,1]");
    }

    double combined() const { return 1.0 - (1.0 - token) * (1.0 - event) * (1.0 - key); }
};

struct MaskPlan {
    std::vector<uint8_t> directives;      // per flat event-token position
    std::vector<uint8_t> event_selected;  // event-pass membership: keys masked too
    std::vector<int64_t> loss_positions;  // mask positions only; unk excluded
    std::vector<int64_t> labels;          // original value ids at loss positions

    void validate(const PackedBatch& b) const {
        if (directives.size() != static_cast<size_t>(b.n_event_tokens()))
            throw InvariantError("mask plan does not cover the batch");
        std::set<int64_t> loss(loss_positions.begin(), loss_positions.end());
        for (size_t i = 0; i < directives.size(); ++i) {
            bool in_loss = loss.count(static_cast<int64_t>(i)) > 0;
            if (directives[i] == static_cast<uint8_t>(Directive::unk) && in_loss)
                throw InvariantError("unk position in loss set");
            if (directives[i] == static_cast<uint8_t>(Directive::mask) && !in_loss)
                throw InvariantError("mask position missing from loss set");
        }
    }
};

inline MaskPlan build_mask(const PackedBatch& b, const MaskRates& rates, Rng& rng) {
    rates.validate();
    int64_t n = b.n_event_tokens();
    MaskPlan plan;
    plan.directives.assign(static_cast<size_t>(n), 0);
    plan.event_selected.assign(static_cast<size_t>(n), 0);
    std::vector<uint8_t> selected(static_cast<size_t>(n), 0);

    // pass 1: token level
    for (int64_t t = 0; t < n; ++t)
        if (rng.bernoulli(rates.token)) selected[static_cast<size_t>(t)] = 1;

    // pass 2: event level, covering every token of the event
    for (int64_t e = 0; e < b.n_events(); ++e) {
        if (!rng.bernoulli(rates.event)) continue;
        for (int64_t t = b.event_offsets[e]; t < b.event_offsets[e + 1]; ++t) {
            selected[static_cast<size_t>(t)] = 1;
            plan.event_selected[static_cast<size_t>(t)] = 1;
        }
    }

    // pass 3: key level, over each record's distinct keys
    for (int64_t r = 0; r < b.n_records(); ++r) {
        std::set<int32_t> keys;
        int64_t t_begin = b.event_offsets[b.record_offsets[r]];
        int64_t t_end = b.event_offsets[b.record_offsets[r + 1]];
        for (int64_t t = t_begin; t < t_end; ++t) keys.insert(b.key_ids[static_cast<size_t>(t)]);
        std::set<int32_t> chosen;
        for (int32_t k : keys)
            if (rng.bernoulli(rates.key)) chosen.insert(k);
        if (chosen.empty()) continue;
        for (int64_t t = t_begin; t < t_end; ++t)
            if (chosen.count(b.key_ids[static_cast<size_t>(t)]))
                selected[static_cast<size_t>(t)] = 1;
    }

    // unk split + labels
    for (int64_t t = 0; t < n; ++t) {
        if (!selected[static_cast<size_t>(t)]) continue;
        if (rng.bernoulli(rates.unk_fraction)) {
            plan.directives[static_cast<size_t>(t)] = static_cast<uint8_t>(Directive::unk);
        } else {
            plan.directives[static_cast<size_t>(t)] = static_cast<uint8_t>(Directive::mask);
            plan.loss_positions.push_back(t);
            plan.labels.push_back(b.value_ids[static_cast<size_t>(t)]);
        }
    }
    return plan;
}

// Corrupted input ids per the plan: value ids always; key ids only where the
// event pass selected the position.
inline void apply_mask(const PackedBatch& b, const MaskPlan& plan, std::vector<int32_t>& keys,
                       std::vector<int32_t>& values) {
    keys = b.key_ids;
    values = b.value_ids;
    for (size_t t = 0; t < plan.directives.size(); ++t) {
        if (plan.directives[t] == static_cast<uint8_t>(Directive::keep)) continue;
        int32_t token = plan.directives[t] == static_cast<uint8_t>(Directive::mask)
                            ? static_cast<int32_t>(Vocab::kMask)
                            : static_cast<int32_t>(Vocab::kUnk);
        values[t] = token;
        if (plan.event_selected[t]) keys[t] = token;
    }
}

// ---------------------------------------------------------------------------
// Optimiser and schedule

struct AdamW {
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.1;
    int64_t t = 0;
    std::map<Param*, std::pair<Tensor, Tensor>> state;

    void step(const std::vector<Param*>& params, double lr) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (Param* p : params) {
            auto& [m, v] = state[p];
            if (m.data.empty()) {
                m = Tensor(p->value.shape);
                v = Tensor(p->value.shape);
            }
            // decay weights on matrices only; vectors (biases, LN) stay undecayed
            bool decay = p->value.shape.size() == 2 && p->value.shape[0] > 1;
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double g = p->grad.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
                double mhat = m.data[i] / bc1;
                double vhat = v.data[i] / bc2;
                double upd = mhat / (std::sqrt(vhat) + eps);
                if (decay) upd += weight_decay * p->value.data[i];
                p->value.data[i] -= lr * upd;
            }
        }
    }
};

// Orthogonalised-momentum optimiser for hidden weight matrices. The momentum
// matrix is projected to (approximately) orthogonal via a quintic
// Newton-Schulz iteration, which equalises the update's singular values and
// speeds up feature learning markedly at small step budgets. Non-matrix
// parameters and the embedding table stay on AdamW.
struct Muon {
    double momentum = 0.95;
    bool nesterov = true;
    int ns_steps = 5;
    std::map<Param*, Tensor> buf;

    static void orthogonalize(Tensor& g, int steps) {
        const double a = 3.4445, b = -4.7750, c = 2.0315;
        bool transposed = g.rows() > g.cols();
        Tensor x = g;
        if (transposed) {
            x = Tensor({g.cols(), g.rows()});
            x.mat() = g.mat().transpose();
        }
        double norm = std::sqrt(x.mat().squaredNorm()) + 1e-12;
        x.mat() /= norm;
        Tensor A({x.rows(), x.rows()}), B({x.rows(), x.rows()}), tmp(x.shape);
        for (int i = 0; i < steps; ++i) {
            A.mat().noalias() = x.mat() * x.mat().transpose();
            B.mat().noalias() = b * A.mat() + c * A.mat() * A.mat();
            tmp.mat().noalias() = a * x.mat() + B.mat() * x.mat();
            x = tmp;
        }
        if (transposed) g.mat() = x.mat().transpose();
        else g = x;
    }

    void step(const std::vector<Param*>& params, double lr) {
        for (Param* p : params) {
            Tensor& m = buf[p];
            if (m.data.empty()) m = Tensor(p->value.shape);
            for (int64_t i = 0; i < m.numel(); ++i)
                m.data[i] = momentum * m.data[i] + p->grad.data[i];
            Tensor update = m;
            if (nesterov)
                for (int64_t i = 0; i < update.numel(); ++i)
                    update.data[i] = p->grad.data[i] + momentum * m.data[i];
            orthogonalize(update, ns_steps);
            double scale = std::sqrt(std::max(
                1.0, static_cast<double>(p->value.rows()) / static_cast<double>(p->value.cols())));
            for (int64_t i = 0; i < p->value.numel(); ++i)
                p->value.data[i] -= lr * scale * update.data[i];
        }
    }
};

struct TrainConfig {
    int64_t steps = 500;
    int64_t warmup = 50;
    double lr = 3e-3;
    double lr_min_frac = 0.1;
    double beta1 = 0.9, beta2 = 0.95, weight_decay = 0.1;
    bool use_muon = false;   // hidden matrices on Muon, the rest on AdamW
    double muon_lr = 0.02;
    MaskRates rates;
    uint64_t seed = 1;
    int64_t log_every = 50;

    void validate() const {
        rates.validate();
        if (rates.combined() >= 1.0)
            throw ConfigError("train: combined mask probability must stay below 1");
        if (steps <= 0) throw ConfigError("train: steps must be positive");
        if (lr <= 0) throw ConfigError("train: lr must be positive");
    }
};

// linear warmup then cosine decay to lr * lr_min_frac
inline double lr_at(const TrainConfig& cfg, int64_t step) {
    if (step < cfg.warmup)
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    double progress = cfg.steps <= cfg.warmup
                          ? 1.0
                          : static_cast<double>(step - cfg.warmup) /
                                static_cast<double>(cfg.steps - cfg.warmup);
    progress = std::min(1.0, progress);
    double lo = cfg.lr * cfg.lr_min_frac;
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + std::cos(kPi * progress));
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainStats {
    double initial_loss = -1.0;
    double final_loss = 0.0;
    int64_t steps_done = 0;
    int64_t skipped_batches = 0;
};

class MetricsLog {
public:
    explicit MetricsLog(const std::string& path) {
        if (!path.empty()) {
            os_.open(path, std::ios::binary);
            if (!os_) throw IoError("cannot open metrics log: " + path);
        }
    }
    void line(const nlohmann::ordered_json& j) {
        if (os_.is_open()) os_ << j.dump() << "\n";
    }
    void flush() {
        if (os_.is_open()) os_.flush();
    }

private:
    std::ofstream os_;
};

inline PretrainStats pretrain(Model& model, const Store& store, const BatchPlan& plan,
                              const TrainConfig& cfg, const std::string& metrics_path = {}) {
    cfg.validate();
    PretrainStats stats;
    AdamW opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    Muon muon;
    Rng mask_rng(cfg.seed ^ 0xa55aULL);
    Rng drop_rng(cfg.seed ^ 0xd120ULL);
    Loader loader(store, plan);
    MetricsLog log(metrics_path);
    auto params = model.parameters();
    // Muon handles hidden matrices; the embedding table, vectors, and biases
    // stay on AdamW either way
    std::vector<Param*> adam_params, muon_params;
    for (Param* p : params) {
        bool hidden_matrix = p->value.shape.size() == 2 && p->value.shape[0] > 1 &&
                             p->name != "embedding";
        if (cfg.use_muon && hidden_matrix) muon_params.push_back(p);
        else adam_params.push_back(p);
    }
    auto started = std::chrono::steady_clock::now();
    int64_t tokens_seen = 0;

    for (uint64_t epoch = 0; stats.steps_done < cfg.steps; ++epoch) {
        loader.run_epoch(epoch, [&](PackedBatch&& batch) {
            if (stats.steps_done >= cfg.steps) return;
            MaskPlan mask = build_mask(batch, cfg.rates, mask_rng);
            if (mask.loss_positions.empty()) {
                ++stats.skipped_batches;  // nothing to reconstruct in this batch
                return;
            }
            std::vector<int32_t> keys, values;
            apply_mask(batch, mask, keys, values);

            for (Param* p : params) p->zero_grad();
            Graph g;
            ModelForward fwd = model.forward(g, batch, /*train=*/true, &drop_rng, &keys, &values);
            Var loss = model.mlm_loss(g, fwd, batch, mask.loss_positions, mask.labels);
            double loss_val = g.value(loss).data[0];
            if (!std::isfinite(loss_val)) {
                nlohmann::ordered_json diag;
                diag["step"] = stats.steps_done;
                diag["loss"] = "non-finite";
                diag["batch_records"] = batch.n_records();
                diag["batch_tokens"] = batch.n_event_tokens();
                diag["loss_positions"] = mask.loss_positions.size();
                log.line(diag);
                log.flush();
                throw EvseqError("pretrain: non-finite loss at step " +
                                 std::to_string(stats.steps_done) + "; diagnostics dumped");
            }
            if (stats.initial_loss < 0) stats.initial_loss = loss_val;
            g.backward(loss);
            double lr = lr_at(cfg, stats.steps_done);
            opt.step(adam_params, lr);
            if (!muon_params.empty())
                muon.step(muon_params, cfg.muon_lr * lr / cfg.lr);  // shared schedule shape

            stats.final_loss = loss_val;
            tokens_seen += batch.total_tokens();
            ++stats.steps_done;
            if (stats.steps_done % cfg.log_every == 0 || stats.steps_done == cfg.steps) {
                double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                            started)
                                  .count();
                nlohmann::ordered_json j;
                j["step"] = stats.steps_done;
                j["loss"] = loss_val;
                j["lr"] = lr_at(cfg, stats.steps_done - 1);
                j["tokens_per_sec"] = secs > 0 ? static_cast<double>(tokens_seen) / secs : 0.0;
                log.line(j);
            }
        });
        if (stats.steps_done == 0 && stats.skipped_batches == 0)
            throw EvseqError("pretrain: loader produced no batches");
    }
    log.flush();
    return stats;
}

// ---------------------------------------------------------------------------
// Task heads: binary or multilabel logits over the [USR] row of z_h

struct TaskHead {
    Param w, b;
    int n_outputs = 1;

    TaskHead() = default;
    TaskHead(int64_t d, int outputs, uint64_t seed) : n_outputs(outputs) {
        Rng rng(seed ^ 0x4eadULL);
        w = Param("task_head.w", randn({d, outputs}, rng, 0.02));
        b = Param("task_head.b", Tensor({1, outputs}));
    }
};

namespace train_detail {

// score every record of the given batches with head(z_h[USR]); sigmoid output
inline std::vector<std::vector<double>> head_scores(Model& model, TaskHead& head,
                                                    const std::vector<PackedBatch>& batches) {
    std::vector<std::vector<double>> scores;
    for (const auto& batch : batches) {
        Graph g;
        ModelForward fwd = model.forward(g, batch);
        Var usr = g.select_rows(fwd.zh, fwd.zh_usr_row);
        Var logits = g.linear(usr, g.constant(head.w.value), g.constant(head.b.value));
        const Tensor& tl = g.value(logits);
        for (int64_t r = 0; r < tl.rows(); ++r) {
            std::vector<double> row(static_cast<size_t>(tl.cols()));
            for (int64_t c = 0; c < tl.cols(); ++c)
                row[static_cast<size_t>(c)] = 1.0 / (1.0 + std::exp(-tl.at(r, c)));
            scores.push_back(std::move(row));
        }
    }
    return scores;
}

// labels aligned with the record order of `batches`
inline void batch_targets(const std::vector<PackedBatch>& batches, const TaskDataset& ds,
                          const std::map<std::string, LabelSet>& labels,
                          std::vector<std::vector<double>>& out) {
    out.clear();
    for (const auto& batch : batches)
        for (const auto& id : batch.record_ids) {
            const LabelSet& l = labels.at(id);
            if (ds.task == Task::product_rec) {
                std::vector<double> row(l.product_rec.begin(), l.product_rec.end());
                out.push_back(std::move(row));
            } else {
                out.push_back({static_cast<double>(l.binary(ds.task))});
            }
        }
}

// primary paired metric: ROC-AUC for binary tasks, mAP for product_rec
inline double primary_metric(const TaskDataset& ds,
                             const std::vector<std::vector<double>>& scores,
                             const std::vector<std::vector<double>>& targets) {
    if (ds.task == Task::product_rec) {
        std::vector<std::vector<double>> s(scores.size());
        std::vector<std::vector<int>> y(targets.size());
        for (size_t i = 0; i < scores.size(); ++i) {
            s[i] = scores[i];
            y[i].assign(targets[i].begin(), targets[i].end());
        }
        auto m = mean_ap(s, y);
        return m ? *m : 0.5;
    }
    std::vector<double> s(scores.size());
    std::vector<int> y(targets.size());
    for (size_t i = 0; i < scores.size(); ++i) {
        s[i] = scores[i][0];
        y[i] = static_cast<int>(targets[i][0]);
    }
    auto m = roc_auc(s, y);
    return m ? *m : 0.5;
}

} // namespace train_detail

struct AdaptConfig {
    int rank = 8;
    double alpha = 8.0;
    double lr = 2e-3;
    int64_t max_steps = 600;
    int64_t eval_every = 60;
    int64_t patience = 4;
    int64_t token_budget = 16384;
    uint64_t seed = 1;
    double dropout = 0.0;  // adaptation runs deterministic by default
};

struct AdaptResult {
    double valid_metric = 0.0;
    double test_metric = 0.0;
    int64_t steps_done = 0;
    TaskHead head;
};

namespace train_detail {

// shared loop for LoRA fine-tuning (frozen base) and from-scratch training
inline AdaptResult adapt_loop(Model& model, const Store& store, const TaskDataset& ds,
                              const std::map<std::string, LabelSet>& labels,
                              const AdaptConfig& cfg, bool lora_mode) {
    model.cfg.dropout = cfg.dropout;
    TaskHead head(model.cfg.d_model, ds.n_outputs, cfg.seed);
    auto train_batches = task_batches(store, ds.train.ids, cfg.token_budget, cfg.seed);
    auto valid_batches = task_batches(store, ds.valid.ids, cfg.token_budget, cfg.seed + 1);
    auto test_batches = task_batches(store, ds.test.ids, cfg.token_budget, cfg.seed + 2);
    if (train_batches.empty()) throw InvariantError("adapt: no training batches");

    std::vector<Param*> trainable{&head.w, &head.b};
    if (lora_mode) {
        for (Param* p : model.lora_parameters()) trainable.push_back(p);
    } else {
        for (Param* p : model.parameters()) trainable.push_back(p);
    }

    std::vector<std::vector<double>> valid_targets, test_targets;
    batch_targets(valid_batches, ds, labels, valid_targets);
    batch_targets(test_batches, ds, labels, test_targets);

    // flattened BCE targets per training batch, computed once
    std::vector<std::vector<double>> train_flat(train_batches.size());
    for (size_t i = 0; i < train_batches.size(); ++i) {
        std::vector<std::vector<double>> rows;
        batch_targets({train_batches[i]}, ds, labels, rows);
        for (const auto& row : rows)
            for (double v : row) train_flat[i].push_back(v);
    }

    AdamW opt;
    opt.weight_decay = lora_mode ? 0.0 : 0.01;
    Rng order_rng(cfg.seed ^ 0x0ba7ULL);
    Rng drop_rng(cfg.seed ^ 0xd0d0ULL);

    double best_valid = -1.0;
    TaskHead best_head = head;
    std::vector<Tensor> best_lora;
    int64_t since_best = 0;
    AdaptResult res;

    std::vector<size_t> order(train_batches.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto snapshot_adapters = [&]() {
        std::vector<Tensor> snap;
        for (Param* p : model.lora_parameters()) snap.push_back(p->value);
        return snap;
    };
    auto restore_adapters = [&](const std::vector<Tensor>& snap) {
        auto ps = model.lora_parameters();
        for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = snap[i];
    };

    int64_t step = 0;
    while (step < cfg.max_steps && since_best <= cfg.patience) {
        order_rng.shuffle(order);
        for (size_t oi = 0; oi < order.size() && step < cfg.max_steps; ++oi) {
            const PackedBatch& batch = train_batches[order[oi]];
            const std::vector<double>& flat = train_flat[order[oi]];

            for (Param* p : trainable) p->zero_grad();
            Graph g;
            ModelForward fwd = model.forward(g, batch, cfg.dropout > 0, &drop_rng);
            Var usr = g.select_rows(fwd.zh, fwd.zh_usr_row);
            Var logits = g.linear(usr, g.param(head.w), g.param(head.b));
            Var loss = g.sigmoid_bce_loss(logits, flat);
            if (!std::isfinite(g.value(loss).data[0]))
                throw EvseqError("adapt: non-finite loss at step " + std::to_string(step));
            g.backward(loss);
            opt.step(trainable, cfg.lr);
            ++step;

            if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
                auto scores = head_scores(model, head, valid_batches);
                double metric = primary_metric(ds, scores, valid_targets);
                if (metric > best_valid) {
                    best_valid = metric;
                    best_head = head;
                    if (lora_mode) best_lora = snapshot_adapters();
                    since_best = 0;
                } else {
                    ++since_best;
                    if (since_best > cfg.patience) break;
                }
            }
        }
        if (order.empty()) break;
    }

    if (best_valid >= 0) {
        head = best_head;
        if (lora_mode && !best_lora.empty()) restore_adapters(best_lora);
    }
    auto valid_scores = head_scores(model, head, valid_batches);
    res.valid_metric = primary_metric(ds, valid_scores, valid_targets);
    auto test_scores = head_scores(model, head, test_batches);
    res.test_metric = primary_metric(ds, test_scores, test_targets);
    res.steps_done = step;
    res.head = head;
    return res;
}

} // namespace train_detail

// LoRA fine-tuning: adapters + head train, backbone frozen.
inline AdaptResult lora_finetune(Model& model, const Store& store, const TaskDataset& ds,
                                 const std::map<std::string, LabelSet>& labels,
                                 const AdaptConfig& cfg) {
    if (ds.n_outputs < 1) throw ConfigError("finetune: bad head arity");
    model.lora_wrap(LoraConfig{cfg.rank, cfg.alpha, true, true}, cfg.seed);
    model.freeze_base = true;
    auto res = train_detail::adapt_loop(model, store, ds, labels, cfg, /*lora=*/true);
    return res;
}

// Comparison arm: identical architecture, random init, task loss only.
inline AdaptResult train_from_scratch(const ModelConfig& arch, const Store& store,
                                      const TaskDataset& ds,
                                      const std::map<std::string, LabelSet>& labels,
                                      const AdaptConfig& cfg) {
    Model model(arch, cfg.seed ^ 0x5c4a7cULL);
    return train_detail::adapt_loop(model, store, ds, labels, cfg, /*lora=*/false);
}

// Frozen-backbone sanity arm: head only, zero adaptation steps equivalent.
inline AdaptResult head_only(Model& model, const Store& store, const TaskDataset& ds,
                             const std::map<std::string, LabelSet>& labels, AdaptConfig cfg) {
    cfg.max_steps = 0;
    model.freeze_base = true;
    return train_detail::adapt_loop(model, store, ds, labels, cfg, /*lora=*/true);
}

} // namespace evseq
