#pragma once
// Three-branch encoder over packed batches.
//
//   token embedding: one shared table for keys and values, summed, plus a
//     static sine/cosine within-field positional encoding; a learnable [USR]
//     or [EVT] vector is prepended per sequence
//   Profile State Encoder: bidirectional, RoPE over life-long log-seconds
//   Event Encoder: per-event segments of the flat buffer, no cross-event
//     attention; calendar features pass a 2-layer MLP and are added to the
//     per-event [EVT] outputs (z_e = z_e' + z_t)
//   History Encoder: rows [z_a : z_e] per record, RoPE over log-seconds to
//     the most recent event (0 at the z_a row)
//   MLM head: concat(token ctx, event ctx, user ctx) -> 3d -> d, logits tied
//     to the embedding table
//
// All encoders are pre-norm with GELU feed-forwards; a final LayerNorm closes
// each stack. LoRA adapters can wrap the q/k/v and feed-forward projections;
// with B = 0 a wrapped model is exactly the base model.

#include "evseq/autodiff.hpp"
#include "evseq/loader.hpp"
#include "evseq/vocab.hpp"

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace evseq {

struct ModelConfig {
    std::string preset = "tiny";
    int64_t d_model = 32;
    int64_t d_ffn = 64;
    int depth_profile = 1;
    int depth_event = 1;
    int depth_history = 1;
    int n_heads = 2;
    double dropout = 0.1;
    int64_t vocab_size = 0;
    double rope_base = 10000.0;
    double label_smoothing = 0.1;
    int64_t max_field_pos = 64;
    bool event_only = false;  // ablation: profile branch removed

    static ModelConfig preset_named(const std::string& name, int64_t vocab_size) {
        ModelConfig c;
        c.preset = name;
        c.vocab_size = vocab_size;
        if (name == "tiny") {
            c.d_model = 32; c.d_ffn = 64;
            c.depth_profile = 1; c.depth_event = 1; c.depth_history = 1;
            c.n_heads = 2;
        } else if (name == "S") {
            c.d_model = 192; c.d_ffn = 768;
            c.depth_profile = 1; c.depth_event = 5; c.depth_history = 2;
            c.n_heads = 3;
        } else if (name == "M") {
            c.d_model = 512; c.d_ffn = 2048;
            c.depth_profile = 3; c.depth_event = 16; c.depth_history = 6;
            c.n_heads = 8;
        } else if (name == "L") {
            c.d_model = 1024; c.d_ffn = 4096;
            c.depth_profile = 9; c.depth_event = 45; c.depth_history = 18;
            c.n_heads = 16;
        } else {
            throw ConfigError("unknown model preset: " + name);
        }
        if (c.d_model % c.n_heads != 0) throw ConfigError("d_model not divisible by heads");
        return c;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["preset"] = preset;
        j["d_model"] = d_model;
        j["d_ffn"] = d_ffn;
        j["depth_profile"] = depth_profile;
        j["depth_event"] = depth_event;
        j["depth_history"] = depth_history;
        j["n_heads"] = n_heads;
        j["dropout"] = dropout;
        j["vocab_size"] = vocab_size;
        j["rope_base"] = rope_base;
        j["label_smoothing"] = label_smoothing;
        j["max_field_pos"] = max_field_pos;
        j["event_only"] = event_only;
        return j;
    }

    static ModelConfig from_json(const nlohmann::ordered_json& j) {
        ModelConfig c;
        c.preset = j.at("preset").get<std::string>();
        c.d_model = j.at("d_model").get<int64_t>();
        c.d_ffn = j.at("d_ffn").get<int64_t>();
        c.depth_profile = j.at("depth_profile").get<int>();
        c.depth_event = j.at("depth_event").get<int>();
        c.depth_history = j.at("depth_history").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.vocab_size = j.at("vocab_size").get<int64_t>();
        c.rope_base = j.at("rope_base").get<double>();
        c.label_smoothing = j.at("label_smoothing").get<double>();
        c.max_field_pos = j.at("max_field_pos").get<int64_t>();
        c.event_only = j.at("event_only").get<bool>();
        return c;
    }
};

// LoRA factors for one wrapped projection: delta W = (alpha/r) * A * B.
struct LoraPair {
    Param a;  // [d_in, r]
    Param b;  // [r, d_out], zero-initialised
};

struct LoraConfig {
    int rank = 8;
    double alpha = 8.0;
    bool wrap_qkv = true;
    bool wrap_mlp = true;
};

struct EncoderLayer {
    Param w_qkv, b_qkv, w_out, b_out;
    Param ln1_g, ln1_b, ln2_g, ln2_b;
    Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    // optional adapters (q, k, v sections of w_qkv; the two ffn mats)
    std::unique_ptr<LoraPair> lora_q, lora_k, lora_v, lora_ffn1, lora_ffn2;
};

struct EncoderStack {
    std::vector<EncoderLayer> layers;
    Param final_ln_g, final_ln_b;
};

// Per-forward artifacts the training/eval stages consume.
struct ModelForward {
    Var ze_hat;   // [aug_tokens, d]: event-encoder outputs over EVT-augmented segments
    Var ze_prime; // [n_events, d]
    Var z_t;      // [n_events, d]
    Var ze;       // [n_events, d] = ze_prime + z_t
    Var za;       // [n_records, d]
    Var zh;       // [n_records + n_events, d]

    // row maps
    std::vector<int64_t> token_row;    // flat event-token idx -> row in ze_hat
    std::vector<int64_t> evt_row;      // event idx -> row in ze_hat
    std::vector<int64_t> zh_usr_row;   // record idx -> row in zh
    std::vector<int64_t> zh_evt_row;   // event idx -> row in zh
};

class Model {
public:
    ModelConfig cfg;
    Param embedding;          // [V, d]
    Param usr_vec, evt_vec;   // [1, d]
    EncoderStack profile_enc, event_enc, history_enc;
    Param cal_w1, cal_b1, cal_w2, cal_b2;
    Param head_w, head_b;     // [3d, d], [1, d]
    Tensor posemb;            // fixed, not trained

    std::optional<LoraConfig> lora;
    bool freeze_base = false;

    Model() = default;

    explicit Model(ModelConfig config, uint64_t seed = 1, double init_std = 0.02)
        : cfg(std::move(config)) {
        if (cfg.vocab_size <= 0) throw ConfigError("model: vocab_size required");
        Rng rng(seed ^ 0xe5eED0D31ULL);
        const double s = init_std;
        int64_t d = cfg.d_model;
        embedding = Param("embedding", randn({cfg.vocab_size, d}, rng, s));
        usr_vec = Param("usr_vec", randn({1, d}, rng, s));
        evt_vec = Param("evt_vec", randn({1, d}, rng, s));
        init_stack(profile_enc, "profile", cfg.depth_profile, rng, s);
        init_stack(event_enc, "event", cfg.depth_event, rng, s);
        init_stack(history_enc, "history", cfg.depth_history, rng, s);
        cal_w1 = Param("cal.w1", randn({6, d}, rng, s));
        cal_b1 = Param("cal.b1", Tensor({1, d}));
        cal_w2 = Param("cal.w2", randn({d, d}, rng, s));
        cal_b2 = Param("cal.b2", Tensor({1, d}));
        head_w = Param("head.w", randn({3 * d, d}, rng, s));
        head_b = Param("head.b", Tensor({1, d}));
        posemb = sinusoid_table(cfg.max_field_pos, d);
    }

    // Base backbone parameters (excludes LoRA factors).
    std::vector<Param*> parameters() {
        std::vector<Param*> ps{&embedding, &usr_vec, &evt_vec,
                               &cal_w1, &cal_b1, &cal_w2, &cal_b2, &head_w, &head_b};
        for (EncoderStack* st : {&profile_enc, &event_enc, &history_enc}) {
            for (auto& l : st->layers)
                for (Param* p : {&l.w_qkv, &l.b_qkv, &l.w_out, &l.b_out, &l.ln1_g, &l.ln1_b,
                                 &l.ln2_g, &l.ln2_b, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2})
                    ps.push_back(p);
            ps.push_back(&st->final_ln_g);
            ps.push_back(&st->final_ln_b);
        }
        if (cfg.event_only) {
            // profile stack exists structurally but is excluded from the
            // parameter set so audits and optimisers see the real model
            std::vector<Param*> filtered;
            for (Param* p : ps)
                if (p->name.rfind("profile.", 0) != 0) filtered.push_back(p);
            ps = std::move(filtered);
        }
        return ps;
    }

    std::vector<Param*> lora_parameters() {
        std::vector<Param*> ps;
        for (EncoderStack* st : {&profile_enc, &event_enc, &history_enc})
            for (auto& l : st->layers)
                for (LoraPair* lp : {l.lora_q.get(), l.lora_k.get(), l.lora_v.get(),
                                     l.lora_ffn1.get(), l.lora_ffn2.get()})
                    if (lp) {
                        ps.push_back(&lp->a);
                        ps.push_back(&lp->b);
                    }
        return ps;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (Param* p : parameters()) n += p->value.numel();
        return n;
    }

    // Shape-level enumeration of the parameters a config would create; lets
    // `model audit` report the 1B preset without allocating 8 GB of weights.
    static std::vector<std::pair<std::string, std::vector<int64_t>>> parameter_shapes(
        const ModelConfig& cfg) {
        std::vector<std::pair<std::string, std::vector<int64_t>>> out;
        int64_t d = cfg.d_model, f = cfg.d_ffn, v = cfg.vocab_size;
        out.push_back({"embedding", {v, d}});
        out.push_back({"usr_vec", {1, d}});
        out.push_back({"evt_vec", {1, d}});
        out.push_back({"cal.w1", {6, d}});
        out.push_back({"cal.b1", {1, d}});
        out.push_back({"cal.w2", {d, d}});
        out.push_back({"cal.b2", {1, d}});
        out.push_back({"head.w", {3 * d, d}});
        out.push_back({"head.b", {1, d}});
        auto stack = [&](const std::string& prefix, int depth) {
            if (cfg.event_only && prefix == "profile") return;
            for (int i = 0; i < depth; ++i) {
                std::string base = prefix + "." + std::to_string(i) + ".";
                out.push_back({base + "w_qkv", {d, 3 * d}});
                out.push_back({base + "b_qkv", {1, 3 * d}});
                out.push_back({base + "w_out", {d, d}});
                out.push_back({base + "b_out", {1, d}});
                out.push_back({base + "ln1_g", {1, d}});
                out.push_back({base + "ln1_b", {1, d}});
                out.push_back({base + "ln2_g", {1, d}});
                out.push_back({base + "ln2_b", {1, d}});
                out.push_back({base + "ffn_w1", {d, f}});
                out.push_back({base + "ffn_b1", {1, f}});
                out.push_back({base + "ffn_w2", {f, d}});
                out.push_back({base + "ffn_b2", {1, d}});
            }
            out.push_back({prefix + ".final_ln_g", {1, d}});
            out.push_back({prefix + ".final_ln_b", {1, d}});
        };
        stack("profile", cfg.depth_profile);
        stack("event", cfg.depth_event);
        stack("history", cfg.depth_history);
        return out;
    }

    static int64_t count_parameters(const ModelConfig& cfg) {
        int64_t n = 0;
        for (const auto& [name, shape] : parameter_shapes(cfg)) {
            (void)name;
            int64_t c = 1;
            for (int64_t s : shape) c *= s;
            n += c;
        }
        return n;
    }

    // adapter parameters a LoRA wrap would add, shape-level
    static int64_t count_lora_parameters(const ModelConfig& cfg, const LoraConfig& lc) {
        int64_t d = cfg.d_model, f = cfg.d_ffn, r = lc.rank;
        int64_t per_layer = 0;
        if (lc.wrap_qkv) per_layer += 3 * (d * r + r * d);
        if (lc.wrap_mlp) per_layer += (d * r + r * f) + (f * r + r * d);
        int depth = cfg.depth_event + cfg.depth_history +
                    (cfg.event_only ? 0 : cfg.depth_profile);
        return per_layer * depth;
    }

    int64_t lora_parameter_count() {
        int64_t n = 0;
        for (Param* p : lora_parameters()) n += p->value.numel();
        return n;
    }

    // ---- LoRA -----------------------------------------------------------

    void lora_wrap(const LoraConfig& lc, uint64_t seed = 7) {
        if (lc.rank <= 0) throw ConfigError("lora: rank must be positive");
        lora = lc;
        Rng rng(seed ^ 0x10aaULL);
        int64_t d = cfg.d_model, f = cfg.d_ffn, r = lc.rank;
        auto make = [&](const std::string& name, int64_t d_in, int64_t d_out) {
            auto lp = std::make_unique<LoraPair>();
            lp->a = Param(name + ".A", randn({d_in, r}, rng, 0.02));
            lp->b = Param(name + ".B", Tensor({r, d_out}));  // zero: wrapped == base at init
            return lp;
        };
        auto wrap_stack = [&](EncoderStack& st, const std::string& prefix) {
            for (size_t i = 0; i < st.layers.size(); ++i) {
                auto& l = st.layers[i];
                std::string base = prefix + "." + std::to_string(i);
                if (lc.wrap_qkv) {
                    l.lora_q = make(base + ".lora_q", d, d);
                    l.lora_k = make(base + ".lora_k", d, d);
                    l.lora_v = make(base + ".lora_v", d, d);
                }
                if (lc.wrap_mlp) {
                    l.lora_ffn1 = make(base + ".lora_ffn1", d, f);
                    l.lora_ffn2 = make(base + ".lora_ffn2", f, d);
                }
            }
        };
        if (!cfg.event_only) wrap_stack(profile_enc, "profile");
        wrap_stack(event_enc, "event");
        wrap_stack(history_enc, "history");
    }

    // Fold adapters into base weights and drop them: W += (alpha/r) A*B.
    void lora_merge() {
        if (!lora) throw InvariantError("lora_merge: model is not wrapped");
        double scale = lora->alpha / static_cast<double>(lora->rank);
        for (EncoderStack* st : {&profile_enc, &event_enc, &history_enc})
            for (auto& l : st->layers) {
                auto fold = [&](LoraPair* lp, Tensor& w, int64_t col_base) {
                    if (!lp) return;
                    Tensor delta({lp->a.value.rows(), lp->b.value.cols()});
                    matmul(lp->a.value, lp->b.value, delta);
                    for (int64_t i = 0; i < delta.rows(); ++i)
                        for (int64_t j = 0; j < delta.cols(); ++j)
                            w.at(i, col_base + j) += scale * delta.at(i, j);
                };
                int64_t d = cfg.d_model;
                fold(l.lora_q.get(), l.w_qkv.value, 0);
                fold(l.lora_k.get(), l.w_qkv.value, d);
                fold(l.lora_v.get(), l.w_qkv.value, 2 * d);
                fold(l.lora_ffn1.get(), l.ffn_w1.value, 0);
                fold(l.lora_ffn2.get(), l.ffn_w2.value, 0);
                l.lora_q.reset();
                l.lora_k.reset();
                l.lora_v.reset();
                l.lora_ffn1.reset();
                l.lora_ffn2.reset();
            }
        lora.reset();
        freeze_base = false;
    }

    // ---- forward ----------------------------------------------------------

    // `train_mode` enables dropout (rng required); deterministic otherwise.
    // Corrupted ids (masking) are passed explicitly; nullptr = batch's own.
    // `padded_events` routes the event stage through the rectangular padded
    // reference path (full pad-cell compute), leaving downstream stages
    // identical — the equivalence and throughput baseline.
    ModelForward forward(Graph& g, const PackedBatch& batch, bool train_mode = false,
                         Rng* rng = nullptr, const std::vector<int32_t>* key_ids = nullptr,
                         const std::vector<int32_t>* value_ids = nullptr,
                         bool padded_events = false) {
        const std::vector<int32_t>& keys = key_ids ? *key_ids : batch.key_ids;
        const std::vector<int32_t>& values = value_ids ? *value_ids : batch.value_ids;
        int64_t n_records = batch.n_records();
        int64_t n_events = batch.n_events();
        Rng* drop = train_mode && cfg.dropout > 0.0 ? rng : nullptr;
        if (train_mode && cfg.dropout > 0.0 && !rng)
            throw InvariantError("forward: train mode requires an rng for dropout");

        ModelForward out;

        // ---- event branch -----------------------------------------------
        // row maps over the packed augmented layout: [EVT_e; tokens of e]...
        std::vector<int64_t> aug_offsets(batch.event_offsets.size());
        for (size_t e = 0; e < batch.event_offsets.size(); ++e)
            aug_offsets[e] = batch.event_offsets[e] + static_cast<int64_t>(e);
        out.evt_row.resize(static_cast<size_t>(n_events));
        out.token_row.resize(keys.size());
        for (int64_t e = 0; e < n_events; ++e) {
            out.evt_row[static_cast<size_t>(e)] = aug_offsets[static_cast<size_t>(e)];
            for (int64_t t = batch.event_offsets[e]; t < batch.event_offsets[e + 1]; ++t)
                out.token_row[static_cast<size_t>(t)] = aug_offsets[static_cast<size_t>(e)] + 1 +
                                                        (t - batch.event_offsets[e]);
        }

        if (padded_events) {
            out.ze_hat = event_stage_padded(g, batch, keys, values, drop);
        } else {
            Var x_tokens = embed_tokens(g, keys, values, batch.positions);
            Var x_aug = g.prepend_special(x_tokens, param_or_const(g, evt_vec), batch.event_offsets);
            out.ze_hat = run_stack(g, event_enc, x_aug, aug_offsets, {}, drop);
        }
        out.ze_prime = g.select_rows(out.ze_hat, out.evt_row);

        // calendar MLP on sin/cos of the three angles
        Tensor cal({n_events, 6});
        for (int64_t e = 0; e < n_events; ++e) {
            cal.at(e, 0) = std::sin(batch.event_hour[static_cast<size_t>(e)]);
            cal.at(e, 1) = std::cos(batch.event_hour[static_cast<size_t>(e)]);
            cal.at(e, 2) = std::sin(batch.event_dow[static_cast<size_t>(e)]);
            cal.at(e, 3) = std::cos(batch.event_dow[static_cast<size_t>(e)]);
            cal.at(e, 4) = std::sin(batch.event_dom[static_cast<size_t>(e)]);
            cal.at(e, 5) = std::cos(batch.event_dom[static_cast<size_t>(e)]);
        }
        Var zt = g.linear(g.constant(std::move(cal)), param_or_const(g, cal_w1), param_or_const(g, cal_b1));
        zt = g.gelu(zt);
        zt = g.linear(zt, param_or_const(g, cal_w2), param_or_const(g, cal_b2));
        out.z_t = zt;
        out.ze = g.add(out.ze_prime, out.z_t);

        // ---- profile branch ----------------------------------------------
        if (!cfg.event_only) {
            Var p_tokens = embed_tokens(g, batch.prof_key_ids, batch.prof_value_ids,
                                        batch.prof_positions);
            Var p_aug = g.prepend_special(p_tokens, param_or_const(g, usr_vec), batch.prof_offsets);
            std::vector<int64_t> p_offsets(batch.prof_offsets.size());
            std::vector<double> p_times;
            p_times.reserve(batch.prof_times.size() + static_cast<size_t>(n_records));
            for (size_t r = 0; r + 1 < batch.prof_offsets.size(); ++r) {
                p_times.push_back(0.0);  // [USR] row
                for (int64_t t = batch.prof_offsets[r]; t < batch.prof_offsets[r + 1]; ++t)
                    p_times.push_back(batch.prof_times[static_cast<size_t>(t)]);
            }
            for (size_t r = 0; r < p_offsets.size(); ++r)
                p_offsets[r] = batch.prof_offsets[r] + static_cast<int64_t>(r);
            Var p_out = run_stack(g, profile_enc, p_aug, p_offsets, p_times, drop);
            std::vector<int64_t> usr_rows(static_cast<size_t>(n_records));
            for (int64_t r = 0; r < n_records; ++r)
                usr_rows[static_cast<size_t>(r)] = p_offsets[static_cast<size_t>(r)];
            out.za = g.select_rows(p_out, usr_rows);
        } else {
            // ablation: the aggregation slot is the bare learnable [USR] vector
            std::vector<int64_t> zero_rows(static_cast<size_t>(n_records), 0);
            out.za = g.rows(param_or_const(g, usr_vec), zero_rows);
        }

        // ---- history branch ----------------------------------------------
        Var h_in = g.stack_records(out.za, out.ze, batch.record_offsets);
        std::vector<int64_t> h_offsets(batch.record_offsets.size());
        std::vector<double> h_times;
        h_times.reserve(static_cast<size_t>(n_records + n_events));
        out.zh_usr_row.resize(static_cast<size_t>(n_records));
        out.zh_evt_row.resize(static_cast<size_t>(n_events));
        {
            int64_t row = 0;
            for (int64_t r = 0; r < n_records; ++r) {
                h_offsets[static_cast<size_t>(r)] = row;
                out.zh_usr_row[static_cast<size_t>(r)] = row;
                h_times.push_back(0.0);  // z_a position
                ++row;
                for (int64_t e = batch.record_offsets[r]; e < batch.record_offsets[r + 1]; ++e) {
                    out.zh_evt_row[static_cast<size_t>(e)] = row;
                    h_times.push_back(batch.event_log_dt[static_cast<size_t>(e)]);
                    ++row;
                }
            }
            h_offsets.back() = row;
        }
        out.zh = run_stack(g, history_enc, h_in, h_offsets, h_times, drop);
        return out;
    }

    // MLM head at the given flat token positions: loss against `labels`.
    Var mlm_loss(Graph& g, const ModelForward& fwd, const PackedBatch& batch,
                 const std::vector<int64_t>& loss_positions, const std::vector<int64_t>& labels) {
        if (loss_positions.empty()) throw InvariantError("mlm: no loss positions");
        if (loss_positions.size() != labels.size())
            throw InvariantError("mlm: plan/batch index mismatch");
        Var h = mlm_head_inputs(g, fwd, batch, loss_positions);
        return g.tied_xent_loss(h, param_or_const(g, embedding), labels, cfg.label_smoothing);
    }

    // Projected head vectors (pre-logits) at arbitrary flat positions.
    Var mlm_head_inputs(Graph& g, const ModelForward& fwd, const PackedBatch& batch,
                        const std::vector<int64_t>& positions) {
        std::vector<int64_t> tok_rows, evt_rows, usr_rows;
        tok_rows.reserve(positions.size());
        evt_rows.reserve(positions.size());
        usr_rows.reserve(positions.size());
        for (int64_t p : positions) {
            int64_t e = event_of_token(batch, p);
            int64_t r = record_of_event(batch, e);
            tok_rows.push_back(fwd.token_row[static_cast<size_t>(p)]);
            evt_rows.push_back(fwd.zh_evt_row[static_cast<size_t>(e)]);
            usr_rows.push_back(fwd.zh_usr_row[static_cast<size_t>(r)]);
        }
        Var a = g.select_rows(fwd.ze_hat, tok_rows);
        Var b = g.select_rows(fwd.zh, evt_rows);
        Var c = g.select_rows(fwd.zh, usr_rows);
        Var cat = g.concat_cols(a, b, c);
        return g.linear(cat, param_or_const(g, head_w), param_or_const(g, head_b));
    }

    // Greedy MLM predictions (argmax over tied logits), eval-only helper.
    std::vector<int64_t> mlm_predict(Graph& g, const ModelForward& fwd, const PackedBatch& batch,
                                     const std::vector<int64_t>& positions) {
        Var h = mlm_head_inputs(g, fwd, batch, positions);
        const Tensor& th = g.value(h);
        const Tensor& te = embedding.value;
        Tensor logits({th.rows(), te.rows()});
        matmul_nt(th, te, logits);
        std::vector<int64_t> out(static_cast<size_t>(th.rows()));
        for (int64_t r = 0; r < th.rows(); ++r) {
            int64_t best = 0;
            for (int64_t v = 1; v < te.rows(); ++v)
                if (logits.at(r, v) > logits.at(r, best)) best = v;
            out[static_cast<size_t>(r)] = best;
        }
        return out;
    }

    // Padded reference event stage, returned in the packed augmented layout
    // ([EVT_e; real tokens of e] per event) so downstream stages are shared.
    Var event_stage_padded(Graph& g, const PackedBatch& batch, const std::vector<int32_t>& in_keys,
                           const std::vector<int32_t>& in_values, Rng* drop) {
        PaddedBatch p = padded_batch(batch, static_cast<int32_t>(Vocab::kPad));
        int64_t seg = p.max_len + 1;  // +1 for the prepended [EVT]
        std::vector<int32_t> keys(static_cast<size_t>(p.n_events * p.max_len),
                                  static_cast<int32_t>(Vocab::kPad));
        std::vector<int32_t> vals = keys;
        std::vector<int16_t> poss(keys.size(), 0);
        for (int64_t e = 0; e < p.n_events; ++e) {
            int64_t len = batch.event_offsets[e + 1] - batch.event_offsets[e];
            for (int64_t t = 0; t < len; ++t) {
                size_t dst = static_cast<size_t>(e * p.max_len + t);
                size_t src = static_cast<size_t>(batch.event_offsets[e] + t);
                keys[dst] = in_keys[src];
                vals[dst] = in_values[src];
                poss[dst] = batch.positions[src];
            }
        }
        Var x = embed_tokens(g, keys, vals, poss);
        std::vector<int64_t> offsets(static_cast<size_t>(p.n_events) + 1);
        for (int64_t e = 0; e <= p.n_events; ++e) offsets[static_cast<size_t>(e)] = e * p.max_len;
        Var aug = g.prepend_special(x, param_or_const(g, evt_vec), offsets);
        std::vector<int64_t> aug_offsets(offsets.size());
        for (size_t e = 0; e < offsets.size(); ++e)
            aug_offsets[e] = offsets[e] + static_cast<int64_t>(e);
        std::vector<uint8_t> valid(static_cast<size_t>(p.n_events) * static_cast<size_t>(seg), 1);
        for (int64_t e = 0; e < p.n_events; ++e)
            for (int64_t t = 0; t < p.max_len; ++t)
                valid[static_cast<size_t>(e * seg + 1 + t)] =
                    p.valid[static_cast<size_t>(e * p.max_len + t)];
        Var out = run_stack(g, event_enc, aug, aug_offsets, {}, drop, &valid);

        // gather back into the packed augmented layout
        std::vector<int64_t> rows;
        rows.reserve(static_cast<size_t>(batch.n_event_tokens() + p.n_events));
        for (int64_t e = 0; e < p.n_events; ++e) {
            rows.push_back(e * seg);
            int64_t len = batch.event_offsets[e + 1] - batch.event_offsets[e];
            for (int64_t t = 0; t < len; ++t) rows.push_back(e * seg + 1 + t);
        }
        return g.select_rows(out, rows);
    }

    // Equivalence-test view of the padded path: ([EVT] rows, real token rows).
    std::pair<Var, Var> forward_events_padded(Graph& g, const PackedBatch& batch, int32_t) {
        Var stage = event_stage_padded(g, batch, batch.key_ids, batch.value_ids, nullptr);
        int64_t n_events = batch.n_events();
        std::vector<int64_t> evt_rows, tok_rows;
        int64_t row = 0;
        for (int64_t e = 0; e < n_events; ++e) {
            evt_rows.push_back(row++);
            int64_t len = batch.event_offsets[e + 1] - batch.event_offsets[e];
            for (int64_t t = 0; t < len; ++t) tok_rows.push_back(row++);
        }
        return {g.select_rows(stage, evt_rows), g.select_rows(stage, tok_rows)};
    }

    // ---- persistence -------------------------------------------------------

    void save(const std::string& path) {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open for write: " + path);
        std::string cfg_json = cfg.to_json().dump();
        std::ostringstream payload(std::ios::binary);
        auto ps = parameters();
        write_pod<uint64_t>(payload, ps.size());
        for (Param* p : ps) {
            write_string(payload, p->name);
            write_pod<uint64_t>(payload, p->value.shape.size());
            for (int64_t d : p->value.shape) write_pod<int64_t>(payload, d);
            write_vec<double>(payload, p->value.data);
        }
        std::string bytes = payload.str();
        write_bytes(os, "EVSEQCKPT1", 10);
        write_string(os, cfg_json);
        Fnv1a64 h;
        h.update(bytes.data(), bytes.size());
        write_pod<uint64_t>(os, h.digest());
        write_bytes(os, bytes.data(), bytes.size());
    }

    static Model load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open: " + path);
        char magic[10];
        read_bytes(is, magic, 10);
        if (std::string_view(magic, 10) != "EVSEQCKPT1") throw IoError("bad checkpoint magic");
        std::string cfg_json = read_string(is);
        uint64_t expect = read_pod<uint64_t>(is);
        std::stringstream rest(std::ios::binary | std::ios::in | std::ios::out);
        rest << is.rdbuf();
        std::string bytes = rest.str();
        Fnv1a64 h;
        h.update(bytes.data(), bytes.size());
        if (h.digest() != expect) throw IoError("checkpoint hash mismatch: " + path);

        Model m(ModelConfig::from_json(nlohmann::ordered_json::parse(cfg_json)), 1);
        std::istringstream ps(bytes, std::ios::binary);
        uint64_t n = read_pod<uint64_t>(ps);
        std::map<std::string, Param*> by_name;
        for (Param* p : m.parameters()) by_name[p->name] = p;
        if (n != by_name.size()) throw IoError("checkpoint parameter count mismatch");
        for (uint64_t i = 0; i < n; ++i) {
            std::string name = read_string(ps);
            uint64_t ndim = read_pod<uint64_t>(ps);
            std::vector<int64_t> shape(ndim);
            for (auto& d : shape) d = read_pod<int64_t>(ps);
            std::vector<double> data = read_vec<double>(ps);
            auto it = by_name.find(name);
            if (it == by_name.end()) throw IoError("unknown parameter in checkpoint: " + name);
            if (it->second->value.shape != shape) throw IoError("shape mismatch: " + name);
            it->second->value.data = std::move(data);
        }
        return m;
    }

    // config + backbone weights; adapters (if any) are not carried over
    Model clone() {
        Model m(cfg, 1);
        auto src = parameters();
        auto dst = m.parameters();
        for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
        return m;
    }

    uint64_t content_hash() {
        Fnv1a64 h;
        for (Param* p : parameters()) {
            h.update(p->name);
            h.update(p->value.data.data(), p->value.data.size() * sizeof(double));
        }
        return h.digest();
    }

    // name, numel rows for `model audit`
    std::vector<std::pair<std::string, int64_t>> audit_table() {
        std::vector<std::pair<std::string, int64_t>> rows;
        for (Param* p : parameters()) rows.emplace_back(p->name, p->value.numel());
        return rows;
    }

private:
    void init_stack(EncoderStack& st, const std::string& prefix, int depth, Rng& rng, double s) {
        int64_t d = cfg.d_model, f = cfg.d_ffn;
        st.layers.resize(static_cast<size_t>(depth));
        for (int i = 0; i < depth; ++i) {
            auto& l = st.layers[static_cast<size_t>(i)];
            std::string base = prefix + "." + std::to_string(i) + ".";
            l.w_qkv = Param(base + "w_qkv", randn({d, 3 * d}, rng, s));
            l.b_qkv = Param(base + "b_qkv", Tensor({1, 3 * d}));
            l.w_out = Param(base + "w_out", randn({d, d}, rng, s));
            l.b_out = Param(base + "b_out", Tensor({1, d}));
            l.ln1_g = Param(base + "ln1_g", ones({1, d}));
            l.ln1_b = Param(base + "ln1_b", Tensor({1, d}));
            l.ln2_g = Param(base + "ln2_g", ones({1, d}));
            l.ln2_b = Param(base + "ln2_b", Tensor({1, d}));
            l.ffn_w1 = Param(base + "ffn_w1", randn({d, f}, rng, s));
            l.ffn_b1 = Param(base + "ffn_b1", Tensor({1, f}));
            l.ffn_w2 = Param(base + "ffn_w2", randn({f, d}, rng, s));
            l.ffn_b2 = Param(base + "ffn_b2", Tensor({1, d}));
        }
        st.final_ln_g = Param(prefix + ".final_ln_g", ones({1, d}));
        st.final_ln_b = Param(prefix + ".final_ln_b", Tensor({1, d}));
    }

    static Tensor ones(std::vector<int64_t> shape) {
        Tensor t(std::move(shape));
        std::fill(t.data.begin(), t.data.end(), 1.0);
        return t;
    }

    Var param_or_const(Graph& g, Param& p) {
        return freeze_base ? g.constant(p.value) : g.param(p);
    }

    Var embed_tokens(Graph& g, const std::vector<int32_t>& keys,
                     const std::vector<int32_t>& values, const std::vector<int16_t>& positions) {
        std::vector<int64_t> kid(keys.begin(), keys.end());
        std::vector<int64_t> vid(values.begin(), values.end());
        Var e = param_or_const(g, embedding);
        Var k_rows = g.rows(e, kid);
        Var v_rows = g.rows(e, vid);
        Var x = g.add(k_rows, v_rows);
        Tensor pos_rows({static_cast<int64_t>(positions.size()), cfg.d_model});
        for (size_t i = 0; i < positions.size(); ++i) {
            int64_t p = std::min<int64_t>(positions[i], cfg.max_field_pos - 1);
            std::copy_n(&posemb.data[p * cfg.d_model], cfg.d_model, &pos_rows.data[i * cfg.d_model]);
        }
        return g.add(x, g.constant(std::move(pos_rows)));
    }

    // effective projection: W (+ scaled LoRA delta when wrapped)
    Var effective_qkv(Graph& g, EncoderLayer& l) {
        Var w = param_or_const(g, l.w_qkv);
        if (!lora || !l.lora_q) return w;
        double sc = lora->alpha / static_cast<double>(lora->rank);
        Var dq = g.scale(g.matmul(g.param(l.lora_q->a), g.param(l.lora_q->b)), sc);
        Var dk = g.scale(g.matmul(g.param(l.lora_k->a), g.param(l.lora_k->b)), sc);
        Var dv = g.scale(g.matmul(g.param(l.lora_v->a), g.param(l.lora_v->b)), sc);
        return g.add(w, g.concat_cols(dq, dk, dv));
    }

    Var effective_ffn(Graph& g, Param& base, LoraPair* lp) {
        Var w = param_or_const(g, base);
        if (!lora || !lp) return w;
        double sc = lora->alpha / static_cast<double>(lora->rank);
        return g.add(w, g.scale(g.matmul(g.param(lp->a), g.param(lp->b)), sc));
    }

    Var run_stack(Graph& g, EncoderStack& st, Var x, const std::vector<int64_t>& offsets,
                  const std::vector<double>& times, Rng* drop,
                  const std::vector<uint8_t>* valid = nullptr) {
        for (auto& l : st.layers) {
            Var normed = g.layernorm(x, param_or_const(g, l.ln1_g), param_or_const(g, l.ln1_b));
            Var attn = g.segment_attention(normed, effective_qkv(g, l), param_or_const(g, l.b_qkv),
                                           param_or_const(g, l.w_out), param_or_const(g, l.b_out),
                                           offsets, times, cfg.n_heads, cfg.rope_base,
                                           drop ? cfg.dropout : 0.0, drop, valid);
            attn = g.dropout(attn, drop ? cfg.dropout : 0.0, drop);
            x = g.add(x, attn);
            Var n2 = g.layernorm(x, param_or_const(g, l.ln2_g), param_or_const(g, l.ln2_b));
            Var h = g.linear(n2, effective_ffn(g, l.ffn_w1, l.lora_ffn1.get()),
                             param_or_const(g, l.ffn_b1));
            h = g.gelu(h);
            h = g.linear(h, effective_ffn(g, l.ffn_w2, l.lora_ffn2.get()),
                         param_or_const(g, l.ffn_b2));
            h = g.dropout(h, drop ? cfg.dropout : 0.0, drop);
            x = g.add(x, h);
        }
        return g.layernorm(x, param_or_const(g, st.final_ln_g), param_or_const(g, st.final_ln_b));
    }

public:
    static int64_t event_of_token(const PackedBatch& batch, int64_t token_pos) {
        auto it = std::upper_bound(batch.event_offsets.begin(), batch.event_offsets.end(),
                                   token_pos);
        return static_cast<int64_t>(it - batch.event_offsets.begin()) - 1;
    }

    static int64_t record_of_event(const PackedBatch& batch, int64_t event_idx) {
        auto it = std::upper_bound(batch.record_offsets.begin(), batch.record_offsets.end(),
                                   event_idx);
        return static_cast<int64_t>(it - batch.record_offsets.begin()) - 1;
    }
};

// Paper-scale vocabulary for family audits: ~60 keys + ~28k value tokens.
inline constexpr int64_t kAuditVocab = 5 + 60 + 28000;

} // namespace evseq
