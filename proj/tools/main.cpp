// evseq: event-sequence encoder pipeline.
// Subcommands: gen, tok fit|encode, shard build|verify|stat, pretrain,
// finetune, scratch, embed, probe, evalsuite, bench, model audit.
//
// One JSON config drives everything (see README); flags override config.
// Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Errors
// print a single machine-parseable line: "error: <class>: <message>".

#include "evseq/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace evseq;

namespace {

RunConfig load_config(const std::string& path) {
    if (path.empty()) return RunConfig::from_json(nlohmann::ordered_json::object());
    return RunConfig::from_file(path);
}

void apply_out_root(RunConfig& cfg) {
    const char* root = std::getenv("EVSEQ_OUT_ROOT");
    if (root && *root && !cfg.out_dir.empty() && cfg.out_dir.front() != '/')
        cfg.out_dir = (std::filesystem::path(root) / cfg.out_dir).string();
}

EmbedMode parse_mode(const std::string& m) {
    if (m == "usr") return EmbedMode::usr;
    if (m == "last_evt") return EmbedMode::last_evt;
    if (m == "concat") return EmbedMode::concat;
    throw ConfigError("bad mode: " + m);
}

int run_evalsuite(const RunConfig& cfg, const std::string& ckpt, const std::string& store_dir,
                  const std::string& labels_path, const std::string& corpus_path,
                  const std::string& out_path) {
    Model model = Model::load(ckpt);
    model.cfg.dropout = 0.0;
    Store store = Store::open(store_dir);
    auto labels = read_labels(labels_path);
    std::vector<UserRecord> records;
    read_canonical(corpus_path, [&](UserRecord&& r) { records.push_back(std::move(r)); });
    auto reports = run_task_suite(model, store, labels, records, cfg.suite);

    std::ofstream os;
    if (!out_path.empty()) {
        os.open(out_path, std::ios::binary);
        if (!os) throw IoError("cannot open for write: " + out_path);
    }
    printf("%-12s %-9s %-8s %10s %10s\n", "task", "arm", "metric", "value", "rel");
    for (const auto& r : reports) {
        printf("%-12s %-9s %-8s %10.4f %+9.1f%%\n", r.task.c_str(), r.arm.c_str(),
               r.metric.c_str(), r.value, 100.0 * r.relative_to_baseline);
        if (os.is_open()) os << r.to_json().dump() << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-sequence foundation encoder pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    bool force = false;
    app.add_option("--config", config_path, "JSON run config");
    app.add_flag("--force", force, "overwrite outputs with an existing manifest");

    // ---- gen ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus with planted labels");
    struct {
        int64_t users = -1;
        int64_t seed = -1;
        std::string from, to, out, labels;
    } gen_opt;
    gen->add_option("--users", gen_opt.users);
    gen->add_option("--seed", gen_opt.seed);
    gen->add_option("--from", gen_opt.from, "YYYY-MM-DD");
    gen->add_option("--to", gen_opt.to, "YYYY-MM-DD");
    gen->add_option("--out", gen_opt.out, "corpus path (default <out_dir>/corpus.jsonl)");
    gen->add_option("--labels", gen_opt.labels, "labels path (default <out_dir>/labels.jsonl)");

    // ---- tok ---------------------------------------------------------------
    auto* tok = app.add_subcommand("tok", "tokenizer fitting and encoding");
    tok->require_subcommand(1);
    auto* tok_fit = tok->add_subcommand("fit", "fit vocab, buckets, and BPE merges");
    std::string tok_corpus, tok_vocab, tok_out;
    tok_fit->add_option("--corpus", tok_corpus)->required();
    auto* tok_encode = tok->add_subcommand("encode", "tokenise a corpus to JSONL");
    tok_encode->add_option("--corpus", tok_corpus)->required();
    tok_encode->add_option("--vocab", tok_vocab)->required();
    tok_encode->add_option("--out", tok_out)->required();

    // ---- shard -------------------------------------------------------------
    auto* shard = app.add_subcommand("shard", "store building and inspection");
    shard->require_subcommand(1);
    std::string shard_corpus, shard_vocab, shard_dir;
    auto* shard_build = shard->add_subcommand("build", "tokenise + truncate + build index/shards");
    shard_build->add_option("--corpus", shard_corpus)->required();
    shard_build->add_option("--vocab", shard_vocab)->required();
    auto* shard_verify = shard->add_subcommand("verify", "checksum and structural verification");
    shard_verify->add_option("--dir", shard_dir)->required();
    auto* shard_stat = shard->add_subcommand("stat", "shard and index statistics");
    shard_stat->add_option("--dir", shard_dir)->required();

    // ---- pretrain / finetune / scratch -------------------------------------
    auto* pre = app.add_subcommand("pretrain", "masked-modelling pre-training");
    std::string pre_store, pre_vocab;
    pre->add_option("--store", pre_store)->required();
    pre->add_option("--vocab", pre_vocab)->required();

    auto* fine = app.add_subcommand("finetune", "LoRA fine-tuning for one task");
    std::string ft_ckpt, ft_store, ft_labels, ft_task;
    std::vector<int> ft_ranks;
    fine->add_option("--checkpoint", ft_ckpt)->required();
    fine->add_option("--store", ft_store)->required();
    fine->add_option("--labels", ft_labels)->required();
    fine->add_option("--task", ft_task)->required();
    fine->add_option("--rank-sweep", ft_ranks, "ranks to sweep (default: the configured rank)");

    auto* scratch = app.add_subcommand("scratch", "full-parameter from-scratch baseline");
    scratch->add_option("--store", ft_store)->required();
    scratch->add_option("--labels", ft_labels)->required();
    scratch->add_option("--task", ft_task)->required();

    // ---- embed / probe / evalsuite / bench ----------------------------------
    auto* embed = app.add_subcommand("embed", "extract frozen embeddings");
    std::string em_ckpt, em_store, em_mode = "usr", em_out;
    embed->add_option("--checkpoint", em_ckpt)->required();
    embed->add_option("--store", em_store)->required();
    embed->add_option("--mode", em_mode, "usr|last_evt|concat");
    embed->add_option("--out", em_out)->required();

    auto* probe_cmd = app.add_subcommand("probe", "linear probe on frozen embeddings");
    std::string pr_ckpt, pr_store, pr_labels, pr_task, pr_mode = "usr";
    probe_cmd->add_option("--checkpoint", pr_ckpt)->required();
    probe_cmd->add_option("--store", pr_store)->required();
    probe_cmd->add_option("--labels", pr_labels)->required();
    probe_cmd->add_option("--task", pr_task)->required();
    probe_cmd->add_option("--mode", pr_mode, "usr|last_evt|concat");

    auto* suite = app.add_subcommand("evalsuite", "task-suite report grid");
    std::string es_ckpt, es_store, es_labels, es_corpus, es_out;
    suite->add_option("--checkpoint", es_ckpt)->required();
    suite->add_option("--store", es_store)->required();
    suite->add_option("--labels", es_labels)->required();
    suite->add_option("--corpus", es_corpus)->required();
    suite->add_option("--out", es_out, "JSONL report destination");

    auto* bench = app.add_subcommand("bench", "packed vs padded throughput");
    double bench_sigma = 1.0;
    int64_t bench_records = 400;
    int64_t bench_budget = 4096;
    int bench_trials = 5;
    bench->add_option("--sigma", bench_sigma,
                      "log-normal sigma of event token lengths (0 = uniform)");
    bench->add_option("--records", bench_records);
    bench->add_option("--budget", bench_budget);
    bench->add_option("--trials", bench_trials);

    // ---- model audit ---------------------------------------------------------
    auto* model_cmd = app.add_subcommand("model", "model utilities");
    model_cmd->require_subcommand(1);
    auto* audit = model_cmd->add_subcommand("audit", "parameter table for a preset");
    std::string audit_preset = "S";
    int64_t audit_vocab = kAuditVocab;
    audit->add_option("--preset", audit_preset, "tiny|S|M|L");
    audit->add_option("--vocab", audit_vocab, "vocabulary size (default paper-scale ~28k)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints usage, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    }

    try {
        RunConfig cfg = load_config(config_path);
        apply_out_root(cfg);

        if (*gen) {
            if (gen_opt.users >= 0) cfg.corpus.n_users = gen_opt.users;
            if (gen_opt.seed >= 0) cfg.seed = static_cast<uint64_t>(gen_opt.seed);
            if (!gen_opt.from.empty()) cfg.corpus.t_from = parse_date(gen_opt.from);
            if (!gen_opt.to.empty()) cfg.corpus.t_to = parse_date(gen_opt.to);
            GenResult res = run_gen(cfg, force);
            if (!gen_opt.out.empty()) {
                std::filesystem::rename(res.corpus_path, gen_opt.out);
                res.corpus_path = gen_opt.out;
            }
            if (!gen_opt.labels.empty()) {
                std::filesystem::rename(res.labels_path, gen_opt.labels);
                res.labels_path = gen_opt.labels;
            }
            printf("generated %lld records -> %s (labels %s)\n",
                   static_cast<long long>(res.records), res.corpus_path.c_str(),
                   res.labels_path.c_str());
        } else if (*tok_fit) {
            std::string vocab_path = run_tok_fit(cfg, tok_corpus, force);
            Vocab v = load_vocab(vocab_path);
            printf("vocab %s: %lld ids (%zu keys, %zu categorical, %zu subwords)\n",
                   vocab_path.c_str(), static_cast<long long>(v.size()), v.key_table.size(),
                   v.cat_table.size(), v.bpe.vocab_size());
        } else if (*tok_encode) {
            int64_t n = run_tok_encode(tok_corpus, tok_vocab, tok_out);
            printf("encoded %lld records -> %s\n", static_cast<long long>(n), tok_out.c_str());
        } else if (*shard_build) {
            ShardBuildResult res = run_shard_build(cfg, shard_corpus, shard_vocab, force);
            printf("store %s: %lld records in %lld shards (%lld zero-event dropped, "
                   "%lld events clipped, %lld profiles clipped, %lld subsampled)\n",
                   res.store_dir.c_str(), static_cast<long long>(res.stats.records_stored),
                   static_cast<long long>(res.stats.shard_count),
                   static_cast<long long>(res.stats.truncation.records_dropped_zero_events),
                   static_cast<long long>(res.stats.truncation.events_token_clipped),
                   static_cast<long long>(res.stats.truncation.profiles_clipped),
                   static_cast<long long>(res.stats.truncation.records_event_subsampled));
        } else if (*shard_verify) {
            Store store = Store::open(shard_dir);
            store.verify();
            printf("store %s: %zu shards, %zu records, checksums OK\n", shard_dir.c_str(),
                   store.shards().size(), store.index().entries().size());
        } else if (*shard_stat) {
            Store store = Store::open(shard_dir);
            int64_t total_events = 0, total_tokens = 0;
            for (const auto& e : store.index().entries()) {
                total_events += e.event_count;
                total_tokens += e.total_event_tokens;
            }
            printf("records %zu  events %lld  event-tokens %lld  shards %zu\n",
                   store.index().entries().size(), static_cast<long long>(total_events),
                   static_cast<long long>(total_tokens), store.shards().size());
            for (const auto& info : store.shards()) {
                ShardData d = store.load(info);
                printf("  shard [%lld..%lld]: %lld records, %lld tokens\n",
                       static_cast<long long>(info.key.lo), static_cast<long long>(info.key.hi),
                       static_cast<long long>(d.n_records()),
                       static_cast<long long>(d.n_tokens()));
            }
        } else if (*pre) {
            PretrainRunResult res = run_pretrain(cfg, pre_store, pre_vocab, force);
            printf("pretrained %lld steps: loss %.4f -> %.4f; checkpoint %s (hash %016llx)\n",
                   static_cast<long long>(res.stats.steps_done), res.stats.initial_loss,
                   res.stats.final_loss, res.checkpoint_path.c_str(),
                   static_cast<unsigned long long>(res.checkpoint_hash));
        } else if (*fine) {
            Store store = Store::open(ft_store);
            auto labels = read_labels(ft_labels);
            TaskDataset ds = build_task_dataset(store, labels, task_from_name(ft_task));
            std::vector<int> ranks = ft_ranks.empty() ? std::vector<int>{cfg.adapt.rank} : ft_ranks;
            for (int rank : ranks) {
                Model model = Model::load(ft_ckpt);
                model.cfg.dropout = 0.0;
                AdaptConfig acfg = cfg.adapt;
                acfg.rank = rank;
                AdaptResult res = lora_finetune(model, store, ds, labels, acfg);
                printf("finetune task=%s rank=%d: valid %.4f test %.4f (%lld steps)\n",
                       ft_task.c_str(), rank, res.valid_metric, res.test_metric,
                       static_cast<long long>(res.steps_done));
            }
        } else if (*scratch) {
            Store store = Store::open(ft_store);
            auto labels = read_labels(ft_labels);
            TaskDataset ds = build_task_dataset(store, labels, task_from_name(ft_task));
            // infer vocab size from the largest stored id
            int64_t max_id = 0;
            for (const auto& info : store.shards()) {
                ShardData d = store.load(info);
                for (int32_t v : d.value_ids) max_id = std::max<int64_t>(max_id, v);
                for (int32_t k : d.key_ids) max_id = std::max<int64_t>(max_id, k);
            }
            ModelConfig mc = ModelConfig::preset_named(cfg.model_preset, max_id + 1);
            mc.dropout = 0.0;
            AdaptResult res = train_from_scratch(mc, store, ds, labels, cfg.adapt);
            printf("scratch task=%s: valid %.4f test %.4f (%lld steps)\n", ft_task.c_str(),
                   res.valid_metric, res.test_metric, static_cast<long long>(res.steps_done));
        } else if (*embed) {
            Model model = Model::load(em_ckpt);
            model.cfg.dropout = 0.0;
            Store store = Store::open(em_store);
            EmbedMode mode = parse_mode(em_mode);
            std::vector<std::string> ids;
            for (const auto& e : store.index().entries()) ids.push_back(e.record_id);
            EmbeddingMatrix em = extract_embeddings(model, store, ids, mode,
                                                    cfg.suite.token_budget);
            std::ofstream os(em_out, std::ios::binary);
            if (!os) throw IoError("cannot open for write: " + em_out);
            os << "evseq-embeddings v1\tmode=" << embed_mode_name(mode)
               << "\tdim=" << em.rows.cols() << "\n";
            for (int64_t i = 0; i < em.rows.rows(); ++i) {
                os << em.ids[static_cast<size_t>(i)];
                for (int64_t c = 0; c < em.rows.cols(); ++c) {
                    char buf[32];
                    snprintf(buf, sizeof(buf), "%.9g", em.rows.at(i, c));
                    os << "\t" << buf;
                }
                os << "\n";
            }
            printf("embeddings: %lld x %lld -> %s\n", static_cast<long long>(em.rows.rows()),
                   static_cast<long long>(em.rows.cols()), em_out.c_str());
        } else if (*probe_cmd) {
            Model model = Model::load(pr_ckpt);
            model.cfg.dropout = 0.0;
            Store store = Store::open(pr_store);
            auto labels = read_labels(pr_labels);
            TaskDataset ds = build_task_dataset(store, labels, task_from_name(pr_task));
            std::vector<std::string> ids;
            for (const auto& e : store.index().entries()) ids.push_back(e.record_id);
            EmbeddingMatrix em =
                extract_embeddings(model, store, ids, parse_mode(pr_mode), cfg.suite.token_budget);
            ProbeTaskResult res = probe_task(em, ds);
            printf("probe task=%s mode=%s: train %.4f valid %.4f test %.4f (converged=%d)\n",
                   pr_task.c_str(), pr_mode.c_str(), res.train_metric, res.valid_metric,
                   res.test_metric, res.converged ? 1 : 0);
        } else if (*suite) {
            return run_evalsuite(cfg, es_ckpt, es_store, es_labels, es_corpus, es_out);
        } else if (*bench) {
            std::string dir = (std::filesystem::path(cfg.out_dir) / "bench_store").string();
            std::filesystem::remove_all(dir);
            build_bench_store(dir, bench_records, bench_sigma, cfg.seed);
            Store store = Store::open(dir);
            Model model(ModelConfig::preset_named(cfg.model_preset, 64), cfg.seed);
            model.cfg.dropout = 0.0;
            BenchResult res = throughput_bench(model, store, bench_budget, bench_trials,
                                               bench_sigma <= 0 ? "uniform" : "lognormal");
            printf("bench (%s, %lld batches%s): packed %.0f tok/s, padded %.0f tok/s, "
                   "speedup %.2fx, pad fraction %.3f (analytic %.3f)\n",
                   res.length_distribution.c_str(), static_cast<long long>(res.batches),
                   res.unstable ? ", WARNING: <100 batches" : "", res.packed_tokens_per_sec,
                   res.padded_tokens_per_sec, res.speedup, res.pad_fraction,
                   res.pad_fraction_analytic);
        } else if (*audit) {
            ModelConfig mc = ModelConfig::preset_named(audit_preset, audit_vocab);
            printf("%-22s %14s\n", "parameter", "count");
            int64_t total = 0;
            for (const auto& [name, shape] : Model::parameter_shapes(mc)) {
                int64_t c = 1;
                for (int64_t s : shape) c *= s;
                total += c;
                // print the first layer of each stack; totals cover everything
                if (name.find(".0.") != std::string::npos || name.find('.') == std::string::npos ||
                    name.rfind("cal.", 0) == 0 || name.rfind("head.", 0) == 0)
                    printf("%-22s %14lld\n", name.c_str(), static_cast<long long>(c));
            }
            printf("%-22s %14lld\n", "TOTAL", static_cast<long long>(total));
            LoraConfig lc{8, 8.0, true, true};
            int64_t lora = Model::count_lora_parameters(mc, lc);
            printf("lora(r=8) trainable %lld (%.2f%% of base)\n", static_cast<long long>(lora),
                   100.0 * static_cast<double>(lora) / static_cast<double>(total));
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: io: " << e.what() << "\n";
        return 1;
    } catch (const InvariantError& e) {
        std::cerr << "error: invariant: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 1;
    }
}
