#pragma once
// Run configuration and pipeline drivers behind the CLI. One structured JSON
// config with per-subcommand sections; unknown keys are rejected as typo
// guards, each subcommand validates only its own section. Every run writes a
// manifest (config hash, code version, seed) beside its outputs and refuses
// to overwrite a matching previous run unless forced.

#include "evseq/eval.hpp"
#include "evseq/tokenize.hpp"

#include <filesystem>
#include <fstream>
#include <set>

namespace evseq {

inline constexpr const char* kCodeVersion = "evseq 1.0.0";

// ---------------------------------------------------------------------------
// Config plumbing

namespace cli_detail {

inline void check_keys(const nlohmann::ordered_json& j, const std::set<std::string>& allowed,
                       const std::string& section) {
    if (!j.is_object()) throw ConfigError("config section must be an object: " + section);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in config section '" + section + "'");
}

template <typename T>
T get_or(const nlohmann::ordered_json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

} // namespace cli_detail

struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir = "runs/default";

    CorpusConfig corpus;
    TokenizerConfig tokenizer;
    BatchPlan loader;
    std::string model_preset = "tiny";
    double model_dropout = 0.1;
    bool event_only = false;
    TrainConfig train;
    AdaptConfig adapt;
    SuiteConfig suite;

    nlohmann::ordered_json raw;  // parsed source, for hashing

    static RunConfig from_json(const nlohmann::ordered_json& j);
    static RunConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config: " + path);
        return from_json(nlohmann::ordered_json::parse(is));
    }
    uint64_t hash() const { return fnv1a64(raw.dump()); }
};

inline RunConfig RunConfig::from_json(const nlohmann::ordered_json& j) {
    using namespace cli_detail;
    RunConfig cfg;
    cfg.raw = j;
    check_keys(j, {"seed", "out_dir", "corpus", "tokenizer", "loader", "model", "train", "adapt",
                   "eval"},
               "<root>");
    cfg.seed = get_or<uint64_t>(j, "seed", 1);
    cfg.out_dir = get_or<std::string>(j, "out_dir", "runs/default");

    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        check_keys(c,
                   {"users", "from", "to", "events_log_mu", "events_log_sigma", "events_min",
                    "events_max", "recurrent_rate", "broken_subscription_rate", "fraud_rate",
                    "credit_ratio_threshold", "ltv_burn_threshold", "label_flip", "n_products",
                    "product_adopt_rate", "product_browse_rate", "n_merchants"},
                   "corpus");
        cfg.corpus.n_users = get_or<int64_t>(c, "users", 1000);
        cfg.corpus.t_from = c.contains("from") ? parse_date(c.at("from").get<std::string>())
                                               : parse_date("2023-01-01");
        cfg.corpus.t_to =
            c.contains("to") ? parse_date(c.at("to").get<std::string>()) : parse_date("2024-07-01");
        cfg.corpus.events_log_mu = get_or<double>(c, "events_log_mu", std::log(80.0));
        cfg.corpus.events_log_sigma = get_or<double>(c, "events_log_sigma", 1.0);
        cfg.corpus.events_min = get_or<int64_t>(c, "events_min", 1);
        cfg.corpus.events_max = get_or<int64_t>(c, "events_max", 20000);
        cfg.corpus.recurrent_rate = get_or<double>(c, "recurrent_rate", 0.3);
        cfg.corpus.broken_subscription_rate = get_or<double>(c, "broken_subscription_rate", 0.25);
        cfg.corpus.fraud_rate = get_or<double>(c, "fraud_rate", 0.12);
        cfg.corpus.credit_ratio_threshold = get_or<double>(c, "credit_ratio_threshold", 0.06);
        cfg.corpus.ltv_burn_threshold = get_or<double>(c, "ltv_burn_threshold", 0.05);
        cfg.corpus.label_flip = get_or<double>(c, "label_flip", 0.02);
        cfg.corpus.n_products = get_or<int>(c, "n_products", 8);
        cfg.corpus.product_adopt_rate = get_or<double>(c, "product_adopt_rate", 0.25);
        cfg.corpus.product_browse_rate = get_or<double>(c, "product_browse_rate", 0.3);
        cfg.corpus.n_merchants = get_or<int>(c, "n_merchants", 1400);
    } else {
        cfg.corpus.t_from = parse_date("2023-01-01");
        cfg.corpus.t_to = parse_date("2024-07-01");
    }

    if (j.contains("tokenizer")) {
        const auto& t = j.at("tokenizer");
        check_keys(t, {"n_buckets", "cardinality_threshold", "bpe_vocab"}, "tokenizer");
        cfg.tokenizer.n_buckets = get_or<int>(t, "n_buckets", 64);
        cfg.tokenizer.cardinality_threshold = get_or<int64_t>(t, "cardinality_threshold", 1000);
        cfg.tokenizer.bpe_vocab = get_or<int64_t>(t, "bpe_vocab", 4096);
    }

    if (j.contains("loader")) {
        const auto& l = j.at("loader");
        check_keys(l, {"token_budget", "workers", "queue_depth", "seed"}, "loader");
        cfg.loader.token_budget = get_or<int64_t>(l, "token_budget", 32768);
        cfg.loader.workers = get_or<int>(l, "workers", 1);
        cfg.loader.queue_depth = get_or<int>(l, "queue_depth", 4);
        cfg.loader.seed = get_or<uint64_t>(l, "seed", cfg.seed);
    } else {
        cfg.loader.seed = cfg.seed;
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, {"preset", "dropout", "event_only"}, "model");
        cfg.model_preset = get_or<std::string>(m, "preset", "tiny");
        cfg.model_dropout = get_or<double>(m, "dropout", 0.1);
        cfg.event_only = get_or<bool>(m, "event_only", false);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t,
                   {"steps", "warmup", "lr", "lr_min_frac", "beta1", "beta2", "weight_decay",
                    "use_muon", "muon_lr", "mask_token", "mask_event", "mask_key",
                    "unk_fraction", "log_every"},
                   "train");
        cfg.train.steps = get_or<int64_t>(t, "steps", 500);
        cfg.train.warmup = get_or<int64_t>(t, "warmup", 50);
        cfg.train.lr = get_or<double>(t, "lr", 3e-3);
        cfg.train.lr_min_frac = get_or<double>(t, "lr_min_frac", 0.1);
        cfg.train.beta1 = get_or<double>(t, "beta1", 0.9);
        cfg.train.beta2 = get_or<double>(t, "beta2", 0.95);
        cfg.train.weight_decay = get_or<double>(t, "weight_decay", 0.1);
        cfg.train.use_muon = get_or<bool>(t, "use_muon", false);
        cfg.train.muon_lr = get_or<double>(t, "muon_lr", 0.02);
        cfg.train.rates.token = get_or<double>(t, "mask_token", 0.15);
        cfg.train.rates.event = get_or<double>(t, "mask_event", 0.10);
        cfg.train.rates.key = get_or<double>(t, "mask_key", 0.10);
        cfg.train.rates.unk_fraction = get_or<double>(t, "unk_fraction", 0.10);
        cfg.train.log_every = get_or<int64_t>(t, "log_every", 50);
    }
    cfg.train.seed = cfg.seed;

    if (j.contains("adapt")) {
        const auto& a = j.at("adapt");
        check_keys(a, {"rank", "alpha", "lr", "max_steps", "eval_every", "patience",
                       "token_budget", "dropout"},
                   "adapt");
        cfg.adapt.rank = get_or<int>(a, "rank", 8);
        cfg.adapt.alpha = get_or<double>(a, "alpha", 8.0);
        cfg.adapt.lr = get_or<double>(a, "lr", 2e-3);
        cfg.adapt.max_steps = get_or<int64_t>(a, "max_steps", 600);
        cfg.adapt.eval_every = get_or<int64_t>(a, "eval_every", 60);
        cfg.adapt.patience = get_or<int64_t>(a, "patience", 4);
        cfg.adapt.token_budget = get_or<int64_t>(a, "token_budget", 16384);
        cfg.adapt.dropout = get_or<double>(a, "dropout", 0.0);
    }
    cfg.adapt.seed = cfg.seed;

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"tasks", "run_lora", "probe_mode", "token_budget"}, "eval");
        if (e.contains("tasks")) {
            cfg.suite.tasks.clear();
            for (const auto& t : e.at("tasks"))
                cfg.suite.tasks.push_back(task_from_name(t.get<std::string>()));
        }
        cfg.suite.run_lora = get_or<bool>(e, "run_lora", true);
        std::string mode = get_or<std::string>(e, "probe_mode", "usr");
        cfg.suite.probe_mode = mode == "usr"      ? EmbedMode::usr
                               : mode == "last_evt" ? EmbedMode::last_evt
                               : mode == "concat"   ? EmbedMode::concat
                                                    : throw ConfigError("bad probe_mode: " + mode);
        cfg.suite.token_budget = get_or<int64_t>(e, "token_budget", 16384);
    }
    cfg.suite.adapt = cfg.adapt;
    return cfg;
}

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
    std::string command;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::string code_version = kCodeVersion;
    nlohmann::ordered_json inputs;
    std::vector<std::string> outputs;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["command"] = command;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["code_version"] = code_version;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        return j;
    }
};

// Refuses a rerun into the same directory with the same manifest unless
// forced; a changed config hash is also refused (the directory holds other
// results) so stale artifacts cannot masquerade as current ones.
inline void write_manifest(const Manifest& m, const std::string& dir, bool force) {
    std::filesystem::create_directories(dir);
    std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    if (std::filesystem::exists(path) && !force)
        throw ConfigError("manifest exists (rerun with --force to overwrite): " + path);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << m.to_json().dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Pipeline drivers (shared by the CLI and the acceptance suite)

struct GenResult {
    std::string corpus_path, labels_path;
    int64_t records = 0;
};

inline GenResult run_gen(const RunConfig& cfg, bool force = false) {
    cfg.corpus.validate();
    std::filesystem::create_directories(cfg.out_dir);
    GenResult res;
    res.corpus_path = (std::filesystem::path(cfg.out_dir) / "corpus.jsonl").string();
    res.labels_path = (std::filesystem::path(cfg.out_dir) / "labels.jsonl").string();

    Manifest man;
    man.command = "gen";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.outputs = {res.corpus_path, res.labels_path};
    write_manifest(man, cfg.out_dir, force);

    CanonicalWriter writer(res.corpus_path);
    std::vector<std::pair<std::string, LabelSet>> labels;
    generate_corpus(cfg.corpus, cfg.seed, [&](LabeledRecord&& r) {
        writer.write(r.record);
        labels.emplace_back(r.record.record_id, std::move(r.labels));
    });
    write_labels(res.labels_path, labels);
    res.records = writer.count();
    return res;
}

inline std::string run_tok_fit(const RunConfig& cfg, const std::string& corpus_path,
                               bool force = false) {
    std::vector<UserRecord> records;
    read_canonical(corpus_path, [&](UserRecord&& r) { records.push_back(std::move(r)); });
    std::vector<std::string> warnings;
    Vocab vocab = fit_vocab(records, cfg.tokenizer, &warnings);
    std::string dir = (std::filesystem::path(cfg.out_dir) / "tok").string();
    std::filesystem::create_directories(dir);
    Manifest man;
    man.command = "tok fit";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.inputs["corpus"] = corpus_path;
    std::string vocab_path = (std::filesystem::path(dir) / "vocab.tsv").string();
    man.outputs = {vocab_path};
    write_manifest(man, dir, force);
    save_vocab(vocab, vocab_path);
    for (const auto& w : warnings) fprintf(stderr, "warning: %s\n", w.c_str());
    return vocab_path;
}

inline int64_t run_tok_encode(const std::string& corpus_path, const std::string& vocab_path,
                              const std::string& out_path) {
    Vocab vocab = load_vocab(vocab_path);
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + out_path);
    os << "evseq-tokens v1\n";
    int64_t n = 0;
    read_canonical(corpus_path, [&](UserRecord&& rec) {
        TokenisedRecord tok = tokenize_record(rec, vocab);
        nlohmann::ordered_json j;
        j["id"] = tok.record_id;
        nlohmann::ordered_json prof = nlohmann::ordered_json::array();
        for (size_t i = 0; i < tok.profile.size(); ++i)
            prof.push_back({tok.profile[i].key_id, tok.profile[i].value_id, tok.profile[i].pos,
                            tok.profile_times[i]});
        j["profile"] = std::move(prof);
        nlohmann::ordered_json evs = nlohmann::ordered_json::array();
        for (const auto& e : tok.events) {
            nlohmann::ordered_json je;
            je["log_dt"] = e.log_dt;
            nlohmann::ordered_json triples = nlohmann::ordered_json::array();
            for (const auto& t : e.triples) triples.push_back({t.key_id, t.value_id, t.pos});
            je["triples"] = std::move(triples);
            evs.push_back(std::move(je));
        }
        j["events"] = std::move(evs);
        os << j.dump() << "\n";
        ++n;
    });
    return n;
}

struct ShardBuildResult {
    std::string store_dir;
    StoreStats stats;
};

inline ShardBuildResult run_shard_build(const RunConfig& cfg, const std::string& corpus_path,
                                        const std::string& vocab_path, bool force = false) {
    Vocab vocab = load_vocab(vocab_path);
    ShardBuildResult res;
    res.store_dir = (std::filesystem::path(cfg.out_dir) / "store").string();
    Manifest man;
    man.command = "shard build";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.inputs["corpus"] = corpus_path;
    man.inputs["vocab"] = vocab_path;
    man.outputs = {res.store_dir};
    write_manifest(man, res.store_dir, force);
    StoreBuilder builder(res.store_dir);
    read_canonical(corpus_path, [&](UserRecord&& rec) {
        builder.add(tokenize_record(rec, vocab));
    });
    res.stats = builder.finalize();
    return res;
}

struct PretrainRunResult {
    std::string checkpoint_path, metrics_path;
    PretrainStats stats;
    uint64_t checkpoint_hash = 0;
};

inline PretrainRunResult run_pretrain(const RunConfig& cfg, const std::string& store_dir,
                                      const std::string& vocab_path, bool force = false) {
    Vocab vocab = load_vocab(vocab_path);
    Store store = Store::open(store_dir);
    ModelConfig mc = ModelConfig::preset_named(cfg.model_preset, vocab.size());
    mc.dropout = cfg.model_dropout;
    mc.event_only = cfg.event_only;
    Model model(mc, cfg.seed);

    PretrainRunResult res;
    std::string dir = (std::filesystem::path(cfg.out_dir) / "pretrain").string();
    std::filesystem::create_directories(dir);
    res.checkpoint_path = (std::filesystem::path(dir) / "model.ckpt").string();
    res.metrics_path = (std::filesystem::path(dir) / "metrics.jsonl").string();
    Manifest man;
    man.command = "pretrain";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.inputs["store"] = store_dir;
    man.inputs["vocab"] = vocab_path;
    man.outputs = {res.checkpoint_path, res.metrics_path};
    write_manifest(man, dir, force);

    res.stats = pretrain(model, store, cfg.loader, cfg.train, res.metrics_path);
    model.save(res.checkpoint_path);
    res.checkpoint_hash = model.content_hash();
    return res;
}

} // namespace evseq
