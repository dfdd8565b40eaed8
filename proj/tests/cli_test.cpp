#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "evseq/cli.hpp"

#include <cstdlib>
#include <filesystem>

using namespace evseq;

namespace {

std::string temp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

int run_bin(const std::string& args) {
#ifdef EVSEQ_BIN_PATH
    std::string cmd = std::string(EVSEQ_BIN_PATH) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
#else
    (void)args;
    return -1;
#endif
}

} // namespace

TEST_CASE("config: defaults, date parsing, typo guard per section") {
    RunConfig def = RunConfig::from_json(nlohmann::ordered_json::object());
    CHECK(def.seed == 1);
    CHECK(def.train.rates.token == 0.15);
    CHECK(def.loader.token_budget == 32768);

    auto j = nlohmann::ordered_json::parse(R"({
        "seed": 9,
        "corpus": {"users": 12, "from": "2023-03-01", "to": "2023-09-01"},
        "train": {"steps": 7, "mask_token": 0.2}
    })");
    RunConfig cfg = RunConfig::from_json(j);
    CHECK(cfg.seed == 9);
    CHECK(cfg.corpus.n_users == 12);
    CHECK(cfg.train.steps == 7);
    CHECK(cfg.train.rates.token == 0.2);
    CHECK(cfg.corpus.t_to - cfg.corpus.t_from == 184 * 86400);

    auto bad = nlohmann::ordered_json::parse(R"({"corpus": {"userz": 5}})");
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
    auto bad_root = nlohmann::ordered_json::parse(R"({"corpuss": {}})");
    CHECK_THROWS_AS(RunConfig::from_json(bad_root), ConfigError);
}

TEST_CASE("date parsing: epoch pins and rejects") {
    CHECK(parse_date("1970-01-01") == 0);
    CHECK(parse_date("2024-01-01") == 1704067200);
    CHECK_THROWS_AS(parse_date("2024-13-01"), ConfigError);
    CHECK_THROWS_AS(parse_date("yesterday"), ConfigError);
}

TEST_CASE("manifest: idempotent reruns refuse without --force") {
    std::string dir = temp_dir("evseq_cli_manifest");
    Manifest m;
    m.command = "gen";
    m.config_hash = 42;
    m.seed = 1;
    write_manifest(m, dir, false);
    CHECK_THROWS_AS(write_manifest(m, dir, false), ConfigError);
    CHECK_NOTHROW(write_manifest(m, dir, true));
    std::filesystem::remove_all(dir);
}

TEST_CASE("pipeline drivers: gen -> tok -> shard -> pretrain, manifests complete") {
    std::string dir = temp_dir("evseq_cli_pipe");
    auto j = nlohmann::ordered_json::parse(R"({
        "seed": 3,
        "corpus": {"users": 60, "from": "2023-01-01", "to": "2024-01-01",
                   "events_log_mu": 2.7, "events_log_sigma": 0.6, "n_merchants": 50},
        "tokenizer": {"n_buckets": 8, "cardinality_threshold": 40, "bpe_vocab": 300},
        "loader": {"token_budget": 4096},
        "model": {"preset": "tiny", "dropout": 0.0},
        "train": {"steps": 8, "warmup": 2, "lr": 0.001, "log_every": 4}
    })");
    RunConfig cfg = RunConfig::from_json(j);
    cfg.out_dir = dir;

    GenResult gen = run_gen(cfg);
    CHECK(gen.records == 60);
    CHECK(std::filesystem::exists(gen.corpus_path));
    CHECK(std::filesystem::exists(dir + "/manifest.json"));

    std::string vocab_path = run_tok_fit(cfg, gen.corpus_path);
    CHECK(std::filesystem::exists(vocab_path));

    ShardBuildResult shard = run_shard_build(cfg, gen.corpus_path, vocab_path);
    CHECK(shard.stats.records_stored == 60);
    Store store = Store::open(shard.store_dir);
    CHECK_NOTHROW(store.verify());

    PretrainRunResult pre = run_pretrain(cfg, shard.store_dir, vocab_path);
    CHECK(pre.stats.steps_done == 8);
    CHECK(std::filesystem::exists(pre.checkpoint_path));
    CHECK(std::filesystem::exists(pre.metrics_path));

    // metrics log is line-delimited json with the contract fields
    std::ifstream is(pre.metrics_path);
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        auto lj = nlohmann::ordered_json::parse(line);
        CHECK(lj.contains("step"));
        CHECK(lj.contains("loss"));
        CHECK(lj.contains("lr"));
        CHECK(lj.contains("tokens_per_sec"));
        ++lines;
    }
    CHECK(lines >= 2);

    // rerun refuses (manifest present), force passes
    CHECK_THROWS_AS(run_gen(cfg), ConfigError);
    CHECK_NOTHROW(run_gen(cfg, /*force=*/true));

    std::filesystem::remove_all(dir);
}

TEST_CASE("tok encode emits one line per record plus header") {
    std::string dir = temp_dir("evseq_cli_encode");
    RunConfig cfg = RunConfig::from_json(nlohmann::ordered_json::parse(
        R"({"corpus": {"users": 10, "from": "2023-01-01", "to": "2023-12-01",
                      "events_log_mu": 2.0, "n_merchants": 30},
            "tokenizer": {"n_buckets": 6, "cardinality_threshold": 30, "bpe_vocab": 280}})"));
    cfg.out_dir = dir;
    GenResult gen = run_gen(cfg);
    std::string vocab_path = run_tok_fit(cfg, gen.corpus_path);
    std::string out = dir + "/tokens.jsonl";
    int64_t n = run_tok_encode(gen.corpus_path, vocab_path, out);
    CHECK(n == 10);
    std::ifstream is(out);
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) ++lines;
    CHECK(lines == 11);
    std::filesystem::remove_all(dir);
}

TEST_CASE("binary: --help exits 0, unknown flag exits 2, unknown subcommand exits 2") {
#ifdef EVSEQ_BIN_PATH
    CHECK(run_bin("--help") == 0);
    CHECK(run_bin("gen --definitely-not-a-flag") == 2);
    CHECK(run_bin("frobnicate") == 2);
    CHECK(run_bin("model audit --preset tiny") == 0);
#else
    MESSAGE("EVSEQ_BIN_PATH not defined; binary checks skipped");
#endif
}
