#pragma once
// Synthetic multi-source event corpus. Each user record carries profile
// state, life-long milestones, and a long-tailed event history drawn from
// four source schemas. Downstream task labels are planted as deterministic
// predicates of pre-evaluation-point data (plus a small configurable flip
// rate), so a hand rule recovers them and learnability is guaranteed.
//
// Generation is a pure function of (config, seed): user i draws from the
// stream fork(seed, i+1), so workers can split the id range freely.

#include "evseq/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cinttypes>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace evseq {

using ordered_json = nlohmann::ordered_json;

enum class ValueKind { numerical, categorical, textual };
enum class SourceType { transaction, app, trading, communication };

inline const char* source_name(SourceType s) {
    switch (s) {
        case SourceType::transaction: return "transaction";
        case SourceType::app: return "app";
        case SourceType::trading: return "trading";
        case SourceType::communication: return "communication";
    }
    return "?";
}

inline SourceType source_from_name(const std::string& s) {
    if (s == "transaction") return SourceType::transaction;
    if (s == "app") return SourceType::app;
    if (s == "trading") return SourceType::trading;
    if (s == "communication") return SourceType::communication;
    throw InvariantError("unknown source type: " + s);
}

struct FieldSpec {
    std::string key_name;
    ValueKind kind = ValueKind::categorical;
    std::vector<std::string> pool;    // categorical values or text templates
    std::vector<double> weights;      // categorical sampling weights, sum 1
    double log_mu = 0.0;              // numerical: log-normal parameters
    double log_sigma = 1.0;
    int decimals = 2;
};

struct SourceSchema {
    SourceType type;
    std::vector<FieldSpec> fields;
    double rate_weight = 1.0;             // relative share of events
    std::array<double, 24> diurnal{};     // within-day hour weights, sum 1

    void validate() const {
        if (fields.empty()) throw InvariantError("schema has no fields");
        std::set<std::string> seen;
        double dsum = 0.0;
        for (double w : diurnal) {
            if (w < 0) throw InvariantError("negative diurnal weight");
            dsum += w;
        }
        if (std::abs(dsum - 1.0) > 1e-9) throw InvariantError("diurnal weights must sum to 1");
        for (const auto& f : fields) {
            if (!seen.insert(f.key_name).second)
                throw InvariantError("duplicate key in schema: " + f.key_name);
            if (f.kind != ValueKind::numerical && !f.weights.empty()) {
                double s = 0.0;
                for (double w : f.weights) s += w;
                if (std::abs(s - 1.0) > 1e-9)
                    throw InvariantError("categorical weights must sum to 1: " + f.key_name);
            }
        }
    }
};

struct Event {
    int64_t timestamp = 0;
    SourceType source = SourceType::transaction;
    std::vector<std::pair<std::string, std::string>> fields;

    std::string field(const std::string& key) const {
        for (const auto& [k, v] : fields)
            if (k == key) return v;
        return {};
    }
};

struct UserRecord {
    std::string record_id;
    std::vector<std::pair<std::string, std::string>> profile_state;
    std::vector<std::tuple<std::string, std::string, int64_t>> lifelong_events;
    std::vector<Event> events;
    int64_t evaluation_point = 0;

    // events sorted, nothing after the evaluation point
    void validate() const {
        for (size_t i = 0; i < events.size(); ++i) {
            if (i > 0 && events[i].timestamp < events[i - 1].timestamp)
                throw InvariantError("record " + record_id + ": events not sorted");
            if (events[i].timestamp > evaluation_point)
                throw InvariantError("record " + record_id + ": event after evaluation point");
        }
        for (const auto& [k, v, t] : lifelong_events) {
            (void)k;
            (void)v;
            if (t > evaluation_point)
                throw InvariantError("record " + record_id + ": lifelong event after evaluation point");
        }
    }
};

enum class Task { credit, fraud, engagement, recurrent, ltv, product_rec };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::credit: return "credit";
        case Task::fraud: return "fraud";
        case Task::engagement: return "engagement";
        case Task::recurrent: return "recurrent";
        case Task::ltv: return "ltv";
        case Task::product_rec: return "product_rec";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    for (Task t : {Task::credit, Task::fraud, Task::engagement, Task::recurrent, Task::ltv,
                   Task::product_rec})
        if (s == task_name(t)) return t;
    throw ConfigError("unknown task: " + s);
}

inline const std::vector<Task>& all_tasks() {
    static const std::vector<Task> t{Task::credit, Task::fraud, Task::engagement,
                                     Task::recurrent, Task::ltv, Task::product_rec};
    return t;
}

struct LabelSet {
    int credit = 0, fraud = 0, engagement = 0, recurrent = 0, ltv = 0;
    std::vector<uint8_t> product_rec;

    int binary(Task t) const {
        switch (t) {
            case Task::credit: return credit;
            case Task::fraud: return fraud;
            case Task::engagement: return engagement;
            case Task::recurrent: return recurrent;
            case Task::ltv: return ltv;
            default: throw InvariantError("binary label requested for multilabel task");
        }
    }
};

// ---------------------------------------------------------------------------
// Config

struct CorpusConfig {
    int64_t n_users = 1000;
    int64_t t_from = 0;
    int64_t t_to = 0;

    // long-tailed event counts, clipped
    double events_log_mu = std::log(80.0);
    double events_log_sigma = 1.0;
    int64_t events_min = 1;
    int64_t events_max = 20000;

    // label planting
    double recurrent_rate = 0.3;
    double broken_subscription_rate = 0.25;  // among non-recurrent users
    double fraud_rate = 0.12;
    double credit_ratio_threshold = 0.06;    // card spend / (monthly income * months)
    double ltv_burn_threshold = 0.05;        // outflow / inflow below this -> positive
    double label_flip = 0.02;
    int n_products = 8;
    double product_adopt_rate = 0.25;
    double product_browse_rate = 0.3;        // hard negatives: 1-2 visits, below threshold

    int n_merchants = 1400;  // sized above the categorical threshold -> BPE path

    std::vector<SourceSchema> schemas;  // empty -> default_schemas()

    void validate() const {
        if (t_to <= t_from) throw ConfigError("corpus: empty time range");
        if (n_users < 0) throw ConfigError("corpus: negative user count");
        for (const auto& s : schemas) s.validate();
    }
};

namespace corpus_detail {

inline std::array<double, 24> office_diurnal() {
    std::array<double, 24> d{};
    const double base[24] = {1, 1, 1, 1, 1, 2, 3, 5, 7, 8, 8, 9, 9, 8, 8, 7, 7, 8, 8, 6, 5, 4, 2, 1};
    double sum = 0;
    for (double b : base) sum += b;
    for (int i = 0; i < 24; ++i) d[i] = base[i] / sum;
    return d;
}

inline std::vector<std::string> make_pool(const std::string& prefix, int n) {
    std::vector<std::string> v;
    v.reserve(n);
    for (int i = 0; i < n; ++i) {
        char buf[48];
        snprintf(buf, sizeof(buf), "%s_%03d", prefix.c_str(), i);
        v.emplace_back(buf);
    }
    return v;
}

inline std::vector<double> zipf_weights(int n) {
    std::vector<double> w(n);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        w[i] = 1.0 / (1.0 + i);
        sum += w[i];
    }
    for (auto& x : w) x /= sum;
    return w;
}

inline const std::vector<std::string>& subscription_pool() {
    static const std::vector<std::string> v{
        "streamflix premium", "musicbox family", "cloudvault pro", "newsdaily digital",
        "fitclub access",     "gamepass ultra",  "podplus audio",  "artspace studio"};
    return v;
}

inline const std::vector<std::string>& shady_pool() {
    static const std::vector<std::string> v{"offshore gems ltd", "quickwin casino",
                                            "grey market exchange"};
    return v;
}

inline const char* payroll_merchant() { return "acme payroll services"; }

inline std::string format_amount(double v, int decimals) {
    char buf[64];
    snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

inline const std::vector<std::string>& noise_tokens() {
    static const std::vector<std::string> v{"ref", "order", "inv", "pos", "web", "auth",
                                            "txn", "batch", "intl", "promo", "std", "fee"};
    return v;
}

} // namespace corpus_detail

inline std::vector<std::string> mcc_pool() { return corpus_detail::make_pool("mcc", 16); }

inline std::string mcc_group_of(const std::string& mcc) {
    // functionally determined sibling: group index = mcc index / 4
    size_t us = mcc.rfind('_');
    int idx = std::stoi(mcc.substr(us + 1));
    char buf[32];
    snprintf(buf, sizeof(buf), "grp_%d", idx / 4);
    return buf;
}

inline std::vector<SourceSchema> default_schemas(const CorpusConfig& cfg) {
    using namespace corpus_detail;
    std::vector<SourceSchema> out;

    SourceSchema tx;
    tx.type = SourceType::transaction;
    tx.rate_weight = 0.55;
    tx.diurnal = office_diurnal();
    tx.fields = {
        FieldSpec{"Type", ValueKind::categorical, {"card_payment", "transfer", "topup", "atm"},
                  {0.6, 0.2, 0.12, 0.08}},
        FieldSpec{"Amount", ValueKind::numerical, {}, {}, std::log(25.0), 1.1, 2},
        FieldSpec{"Currency", ValueKind::categorical,
                  {"eur", "usd", "gbp", "pln", "ron", "chf", "sek", "nok", "dkk", "czk", "huf", "jpy"},
                  zipf_weights(12)},
        FieldSpec{"Mcc", ValueKind::categorical, mcc_pool(), zipf_weights(16)},
        FieldSpec{"MccGroup", ValueKind::categorical, {}, {}},  // derived from Mcc
        FieldSpec{"Direction", ValueKind::categorical, {"out", "in"}, {0.85, 0.15}},
        FieldSpec{"Merchant", ValueKind::textual, make_pool("merchant", cfg.n_merchants), {}},
        FieldSpec{"Description", ValueKind::textual, {}, {}},
    };

    SourceSchema app;
    app.type = SourceType::app;
    app.rate_weight = 0.3;
    app.diurnal = office_diurnal();
    // product screens are planted, never drawn as background noise
    std::vector<std::string> screens = {"home",    "cards",   "payments", "insights", "settings",
                                        "support", "rewards", "invite",   "security", "vaults"};
    app.fields = {
        FieldSpec{"Screen", ValueKind::categorical, screens, zipf_weights(static_cast<int>(screens.size()))},
        FieldSpec{"Action", ValueKind::categorical, {"open", "tap", "scroll", "close"}, {0.3, 0.4, 0.2, 0.1}},
        FieldSpec{"DurationSec", ValueKind::numerical, {}, {}, std::log(12.0), 0.8, 1},
    };

    SourceSchema tr;
    tr.type = SourceType::trading;
    tr.rate_weight = 0.05;
    tr.diurnal = office_diurnal();
    tr.fields = {
        FieldSpec{"Symbol", ValueKind::categorical, make_pool("sym", 40), zipf_weights(40)},
        FieldSpec{"Side", ValueKind::categorical, {"buy", "sell"}, {0.55, 0.45}},
        FieldSpec{"Quantity", ValueKind::numerical, {}, {}, std::log(3.0), 1.0, 4},
        FieldSpec{"OrderValue", ValueKind::numerical, {}, {}, std::log(150.0), 1.0, 2},
    };

    SourceSchema cm;
    cm.type = SourceType::communication;
    cm.rate_weight = 0.1;
    cm.diurnal = office_diurnal();
    cm.fields = {
        FieldSpec{"Channel", ValueKind::categorical, {"email", "push", "sms", "in_app"},
                  {0.35, 0.4, 0.1, 0.15}},
        FieldSpec{"Template", ValueKind::categorical, make_pool("tmpl", 20), zipf_weights(20)},
        FieldSpec{"Outcome", ValueKind::categorical, {"delivered", "opened", "clicked"},
                  {0.6, 0.3, 0.1}},
    };

    out = {tx, app, tr, cm};
    for (auto& s : out) s.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Hand rules: recover planted labels from raw data. The generator computes
// its labels with these same predicates (then applies flips), so rule
// recovery accuracy is 1 - flip_rate by construction. Never used by models.

inline LabelSet recover_labels(const UserRecord& rec, const CorpusConfig& cfg) {
    using namespace corpus_detail;
    LabelSet lab;
    lab.product_rec.assign(static_cast<size_t>(cfg.n_products), 0);

    std::map<std::string, std::vector<int64_t>> sub_times;
    double spend = 0, payroll_total = 0, inflow = 0, outflow = 0;
    int payroll_count = 0;
    std::map<int, int> product_counts;

    const auto& subs = subscription_pool();
    const auto& shady = shady_pool();

    for (const auto& e : rec.events) {
        if (e.source == SourceType::transaction) {
            std::string type = e.field("Type");
            std::string merchant = e.field("Merchant");
            std::string amt = e.field("Amount");
            double a = amt.empty() ? 0.0 : std::stod(amt);
            if (std::find(subs.begin(), subs.end(), merchant) != subs.end())
                sub_times[merchant].push_back(e.timestamp);
            if (std::find(shady.begin(), shady.end(), merchant) != shady.end() && a > 500.0)
                lab.fraud = 1;
            if (merchant == payroll_merchant() && type == "topup") {
                payroll_total += a;
                ++payroll_count;
            }
            if (type == "card_payment") spend += a;
            if (type == "topup") inflow += a;
            if (type == "card_payment" || type == "atm") outflow += a;
        } else if (e.source == SourceType::app) {
            std::string screen = e.field("Screen");
            if (screen.rfind("screen_product_", 0) == 0)
                ++product_counts[std::stoi(screen.substr(15))];
        }
    }

    for (const auto& [m, times] : sub_times) {
        (void)m;
        if (times.size() < 3) continue;
        bool cadence = true;
        for (size_t i = 1; i < times.size(); ++i) {
            double gap_days = static_cast<double>(times[i] - times[i - 1]) / 86400.0;
            if (std::abs(gap_days - 30.0) > 3.0) cadence = false;
        }
        if (cadence) lab.recurrent = 1;
    }

    if (payroll_count > 0) {
        double monthly_income = payroll_total / payroll_count;
        double ratio = spend / (monthly_income * payroll_count);
        lab.credit = ratio > cfg.credit_ratio_threshold ? 1 : 0;
    }

    lab.ltv = (inflow > 0.0 && outflow / inflow < cfg.ltv_burn_threshold) ? 1 : 0;

    for (const auto& [k, v] : rec.profile_state)
        if (k == "Plan") lab.engagement = (v == "metal" || v == "ultra") ? 1 : 0;

    for (auto& [k, c] : product_counts)
        if (c >= 3 && k >= 0 && k < cfg.n_products) lab.product_rec[static_cast<size_t>(k)] = 1;

    return lab;
}

// ---------------------------------------------------------------------------
// Generation

struct LabeledRecord {
    UserRecord record;
    LabelSet labels;
};

namespace corpus_detail {

inline Event make_transaction(const SourceSchema& sc, Rng& rng, int64_t ts,
                              const std::string& merchant_override = {},
                              double amount_override = -1.0,
                              const std::string& type_override = {}) {
    Event e;
    e.timestamp = ts;
    e.source = SourceType::transaction;
    std::string mcc, merchant;
    for (const auto& f : sc.fields) {
        if (f.key_name == "Type") {
            e.fields.emplace_back("Type", type_override.empty() ? f.pool[rng.categorical(f.weights)]
                                                                : type_override);
        } else if (f.key_name == "Amount") {
            double amount = amount_override > 0 ? amount_override : rng.lognormal(f.log_mu, f.log_sigma);
            e.fields.emplace_back("Amount", format_amount(amount, f.decimals));
        } else if (f.key_name == "Mcc") {
            mcc = f.pool[rng.categorical(f.weights)];
            e.fields.emplace_back("Mcc", mcc);
        } else if (f.key_name == "MccGroup") {
            e.fields.emplace_back("MccGroup", mcc_group_of(mcc));
        } else if (f.key_name == "Merchant") {
            merchant = merchant_override.empty() ? f.pool[rng.uniform_u64(f.pool.size())]
                                                 : merchant_override;
            e.fields.emplace_back("Merchant", merchant);
        } else if (f.key_name == "Description") {
            const auto& noise = noise_tokens();
            std::string d = "payment at " + merchant + " " + noise[rng.uniform_u64(noise.size())] +
                            " " + std::to_string(rng.uniform_u64(100000));
            e.fields.emplace_back("Description", d);
        } else {
            e.fields.emplace_back(f.key_name, f.pool[rng.categorical(f.weights)]);
        }
    }
    return e;
}

inline Event make_generic(const SourceSchema& sc, Rng& rng, int64_t ts) {
    Event e;
    e.timestamp = ts;
    e.source = sc.type;
    for (const auto& f : sc.fields) {
        if (f.kind == ValueKind::numerical) {
            e.fields.emplace_back(f.key_name,
                                  format_amount(rng.lognormal(f.log_mu, f.log_sigma), f.decimals));
        } else {
            e.fields.emplace_back(f.key_name, f.pool[f.weights.empty()
                                                         ? rng.uniform_u64(f.pool.size())
                                                         : rng.categorical(f.weights)]);
        }
    }
    return e;
}

inline int64_t draw_timestamp(Rng& rng, const SourceSchema& sc, int64_t from, int64_t to) {
    int64_t days = std::max<int64_t>(1, (to - from) / 86400);
    int64_t day = static_cast<int64_t>(rng.uniform_u64(static_cast<uint64_t>(days)));
    std::vector<double> dw(sc.diurnal.begin(), sc.diurnal.end());
    int hour = static_cast<int>(rng.categorical(dw));
    int64_t ts = from + day * 86400 + hour * 3600 + static_cast<int64_t>(rng.uniform_u64(3600));
    return std::min(ts, to - 1);
}

inline Event make_product_visit(Rng& rng, int64_t ts, int product) {
    Event e;
    e.timestamp = ts;
    e.source = SourceType::app;
    e.fields = {{"Screen", "screen_product_" + std::to_string(product)},
                {"Action", "open"},
                {"DurationSec", format_amount(rng.lognormal(std::log(20.0), 0.5), 1)}};
    return e;
}

} // namespace corpus_detail

inline LabeledRecord generate_user(const CorpusConfig& cfg, const std::vector<SourceSchema>& schemas,
                                   uint64_t seed, int64_t user_idx) {
    using namespace corpus_detail;
    if (schemas.empty()) throw ConfigError("corpus: zero schemas");

    Rng rng = Rng(seed).fork(static_cast<uint64_t>(user_idx) + 1);
    LabeledRecord out;
    UserRecord& rec = out.record;
    char idbuf[24];
    snprintf(idbuf, sizeof(idbuf), "u%08" PRId64, user_idx);
    rec.record_id = idbuf;

    int64_t range = cfg.t_to - cfg.t_from;
    rec.evaluation_point =
        cfg.t_to - static_cast<int64_t>(rng.uniform(0.0, 0.1 * static_cast<double>(range)));

    // --- profile state ------------------------------------------------------
    static const std::vector<std::string> plans{"standard", "plus", "premium", "metal", "ultra"};
    static const std::vector<double> plan_w{0.40, 0.25, 0.15, 0.12, 0.08};
    const std::string plan = plans[rng.categorical(plan_w)];
    static const std::vector<std::string> regions = make_pool("region", 20);
    rec.profile_state = {
        {"Plan", plan},
        {"Region", regions[rng.uniform_u64(regions.size())]},
        {"BaseCurrency", rng.bernoulli(0.7) ? "eur" : "usd"},
        {"InsuranceState", rng.bernoulli(0.3) ? "active" : "none"},
        {"KycTier", rng.bernoulli(0.8) ? "full" : "basic"},
    };
    int64_t created = cfg.t_from - static_cast<int64_t>(rng.uniform_u64(3 * 365 * 86400ULL));
    rec.lifelong_events.emplace_back("AccountCreated", "account_created", created);
    if (rng.bernoulli(0.9))
        rec.lifelong_events.emplace_back(
            "FirstTopup", "first_topup",
            created + static_cast<int64_t>(rng.uniform_u64(60 * 86400ULL)));
    if (rng.bernoulli(0.25))
        rec.lifelong_events.emplace_back(
            "FirstTrade", "first_trade",
            created + static_cast<int64_t>(rng.uniform_u64(300 * 86400ULL)));

    // --- base events ----------------------------------------------------------
    int64_t n_events = static_cast<int64_t>(rng.lognormal(cfg.events_log_mu, cfg.events_log_sigma));
    n_events = std::clamp(n_events, cfg.events_min, cfg.events_max);

    std::vector<double> source_w;
    source_w.reserve(schemas.size());
    for (const auto& s : schemas) source_w.push_back(s.rate_weight);

    rec.events.reserve(static_cast<size_t>(n_events) + 64);
    for (int64_t i = 0; i < n_events; ++i) {
        const SourceSchema& sc = schemas[rng.categorical(source_w)];
        int64_t ts = draw_timestamp(rng, sc, cfg.t_from, rec.evaluation_point);
        rec.events.push_back(sc.type == SourceType::transaction ? make_transaction(sc, rng, ts)
                                                                : make_generic(sc, rng, ts));
    }

    const SourceSchema* tx_schema = nullptr;
    const SourceSchema* app_schema = nullptr;
    for (const auto& s : schemas) {
        if (s.type == SourceType::transaction) tx_schema = &s;
        if (s.type == SourceType::app) app_schema = &s;
    }

    // --- recurrent: subscription merchant with ~30-day cadence ----------------
    if (tx_schema) {
        bool plant_recurrent = rng.bernoulli(cfg.recurrent_rate);
        bool plant_broken = !plant_recurrent && rng.bernoulli(cfg.broken_subscription_rate);
        if (plant_recurrent || plant_broken) {
            const auto& pool = subscription_pool();
            std::string sub = pool[rng.uniform_u64(pool.size())];
            double amount = 5.0 + rng.uniform(0.0, 25.0);
            if (plant_recurrent) {
                int64_t t = cfg.t_from + static_cast<int64_t>(rng.uniform_u64(20 * 86400ULL));
                while (t < rec.evaluation_point) {
                    rec.events.push_back(
                        make_transaction(*tx_schema, rng, t, sub, amount, "card_payment"));
                    double gap = std::clamp(rng.normal(30.0, 1.0), 27.5, 32.5);
                    t += static_cast<int64_t>(gap * 86400.0);
                }
            } else {
                int n_occ = rng.bernoulli(0.5) ? 2 : 3 + static_cast<int>(rng.uniform_u64(3));
                int64_t t = cfg.t_from + static_cast<int64_t>(rng.uniform_u64(20 * 86400ULL));
                for (int i = 0; i < n_occ && t < rec.evaluation_point; ++i) {
                    rec.events.push_back(
                        make_transaction(*tx_schema, rng, t, sub, amount, "card_payment"));
                    double gap = rng.bernoulli(0.5) ? rng.uniform(5.0, 20.0) : rng.uniform(40.0, 80.0);
                    t += static_cast<int64_t>(gap * 86400.0);
                }
            }
        }
    }

    // --- credit: monthly payroll inflow ---------------------------------------
    if (tx_schema) {
        double income = rng.lognormal(std::log(2200.0), 0.35);
        int64_t t = cfg.t_from + static_cast<int64_t>(rng.uniform_u64(28 * 86400ULL));
        while (t < rec.evaluation_point) {
            rec.events.push_back(make_transaction(*tx_schema, rng, t, payroll_merchant(),
                                                  income * rng.uniform(0.97, 1.03), "topup"));
            t += static_cast<int64_t>(86400.0 * rng.uniform(29.0, 31.0));
        }
    }

    // --- fraud: shady merchant with a large amount -----------------------------
    if (tx_schema && rng.bernoulli(cfg.fraud_rate)) {
        const auto& pool = shady_pool();
        int n = 1 + static_cast<int>(rng.uniform_u64(3));
        for (int i = 0; i < n; ++i) {
            int64_t ts = cfg.t_from + static_cast<int64_t>(rng.uniform_u64(static_cast<uint64_t>(
                                          std::max<int64_t>(1, rec.evaluation_point - cfg.t_from))));
            rec.events.push_back(make_transaction(*tx_schema, rng, ts,
                                                  pool[rng.uniform_u64(pool.size())],
                                                  600.0 + rng.uniform(0.0, 2000.0), "card_payment"));
        }
    }

    // --- product_rec: adopted products get a >=3 burst, browsers stay below ----
    if (app_schema) {
        for (int k = 0; k < cfg.n_products; ++k) {
            int n = 0;
            if (rng.bernoulli(cfg.product_adopt_rate)) n = 3 + static_cast<int>(rng.uniform_u64(4));
            else if (rng.bernoulli(cfg.product_browse_rate)) n = 1 + static_cast<int>(rng.uniform_u64(2));
            for (int i = 0; i < n; ++i)
                rec.events.push_back(make_product_visit(
                    rng, draw_timestamp(rng, *app_schema, cfg.t_from, rec.evaluation_point), k));
        }
    }

    std::sort(rec.events.begin(), rec.events.end(),
              [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });

    // labels = rule predicates over the realized record, then flips
    out.labels = recover_labels(rec, cfg);
    LabelSet& lab = out.labels;
    auto flip = [&](int& v) {
        if (rng.bernoulli(cfg.label_flip)) v = 1 - v;
    };
    flip(lab.credit);
    flip(lab.fraud);
    flip(lab.engagement);
    flip(lab.recurrent);
    flip(lab.ltv);

    rec.validate();
    return out;
}

// Streaming driver; `sink` is called once per user in id order.
inline void generate_corpus(const CorpusConfig& cfg, uint64_t seed,
                            const std::function<void(LabeledRecord&&)>& sink) {
    cfg.validate();
    const auto schemas = cfg.schemas.empty() ? default_schemas(cfg) : cfg.schemas;
    if (schemas.empty()) throw ConfigError("corpus: zero schemas");
    for (int64_t i = 0; i < cfg.n_users; ++i) sink(generate_user(cfg, schemas, seed, i));
}

// ---------------------------------------------------------------------------
// Canonical record file: versioned header line, then one JSON record per line.

inline constexpr const char* kCorpusHeader = "evseq-corpus v1";
inline constexpr const char* kLabelsHeader = "evseq-labels v1";

inline ordered_json record_to_json(const UserRecord& rec) {
    ordered_json j;
    j["id"] = rec.record_id;
    j["eval_point"] = rec.evaluation_point;
    ordered_json prof = ordered_json::array();
    for (const auto& [k, v] : rec.profile_state) prof.push_back({{"k", k}, {"v", v}});
    j["profile"] = std::move(prof);
    ordered_json ll = ordered_json::array();
    for (const auto& [k, v, t] : rec.lifelong_events) ll.push_back({{"k", k}, {"v", v}, {"t", t}});
    j["lifelong"] = std::move(ll);
    ordered_json evs = ordered_json::array();
    for (const auto& e : rec.events) {
        ordered_json je;
        je["t"] = e.timestamp;
        je["src"] = source_name(e.source);
        ordered_json kv = ordered_json::array();
        for (const auto& [k, v] : e.fields) kv.push_back({k, v});
        je["kv"] = std::move(kv);
        evs.push_back(std::move(je));
    }
    j["events"] = std::move(evs);
    return j;
}

inline UserRecord record_from_json(const ordered_json& j) {
    UserRecord rec;
    rec.record_id = j.at("id").get<std::string>();
    rec.evaluation_point = j.at("eval_point").get<int64_t>();
    for (const auto& p : j.at("profile"))
        rec.profile_state.emplace_back(p.at("k").get<std::string>(), p.at("v").get<std::string>());
    for (const auto& p : j.at("lifelong"))
        rec.lifelong_events.emplace_back(p.at("k").get<std::string>(), p.at("v").get<std::string>(),
                                         p.at("t").get<int64_t>());
    for (const auto& je : j.at("events")) {
        Event e;
        e.timestamp = je.at("t").get<int64_t>();
        e.source = source_from_name(je.at("src").get<std::string>());
        for (const auto& kv : je.at("kv"))
            e.fields.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
        rec.events.push_back(std::move(e));
    }
    return rec;
}

class CanonicalWriter {
public:
    explicit CanonicalWriter(const std::string& path) : os_(path, std::ios::binary) {
        if (!os_) throw IoError("cannot open for write: " + path);
        os_ << kCorpusHeader << "\n";
    }

    // throws InvariantError (with the record id) on invalid records
    void write(const UserRecord& rec) {
        rec.validate();
        os_ << record_to_json(rec).dump() << "\n";
        if (!os_) throw IoError("write failed");
        ++count_;
    }

    int64_t count() const { return count_; }

private:
    std::ofstream os_;
    int64_t count_ = 0;
};

inline void read_canonical(const std::string& path, const std::function<void(UserRecord&&)>& sink) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kCorpusHeader)
        throw IoError("bad corpus header in " + path);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        UserRecord rec = record_from_json(ordered_json::parse(line));
        rec.validate();
        sink(std::move(rec));
    }
}

inline void write_labels(const std::string& path,
                         const std::vector<std::pair<std::string, LabelSet>>& labels) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << kLabelsHeader << "\n";
    for (const auto& [id, lab] : labels) {
        ordered_json j;
        j["id"] = id;
        j["credit"] = lab.credit;
        j["fraud"] = lab.fraud;
        j["engagement"] = lab.engagement;
        j["recurrent"] = lab.recurrent;
        j["ltv"] = lab.ltv;
        j["product_rec"] = lab.product_rec;
        os << j.dump() << "\n";
    }
}

inline std::map<std::string, LabelSet> read_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kLabelsHeader) throw IoError("bad labels header");
    std::map<std::string, LabelSet> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = ordered_json::parse(line);
        LabelSet lab;
        lab.credit = j.at("credit").get<int>();
        lab.fraud = j.at("fraud").get<int>();
        lab.engagement = j.at("engagement").get<int>();
        lab.recurrent = j.at("recurrent").get<int>();
        lab.ltv = j.at("ltv").get<int>();
        lab.product_rec = j.at("product_rec").get<std::vector<uint8_t>>();
        out[j.at("id").get<std::string>()] = std::move(lab);
    }
    return out;
}

// Deterministic split by record id: 64/16/20 train/valid/test.
enum class Split { train, valid, test };

inline Split split_of(const std::string& record_id) {
    uint64_t h = fnv1a64(record_id) % 100;
    if (h < 64) return Split::train;
    if (h < 80) return Split::valid;
    return Split::test;
}

} // namespace evseq
