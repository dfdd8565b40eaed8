#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "evseq/tokenize.hpp"
#include "evseq/vocab.hpp"

#include <filesystem>

using namespace evseq;

TEST_CASE("fit_buckets: quantile boundaries match brute-force oracle") {
    std::vector<double> values;
    for (int i = 1; i <= 100; ++i) values.push_back(i);
    BucketSpec spec = fit_buckets("Amount", values, 4);
    REQUIRE(spec.boundaries.size() == 3);
    CHECK(spec.boundaries[0] == doctest::Approx(25.75));
    CHECK(spec.boundaries[1] == doctest::Approx(50.5));
    CHECK(spec.boundaries[2] == doctest::Approx(75.25));

    // rank oracle: bucket of v = #boundaries below-or-equal v
    auto oracle = [&](double v) {
        int b = 0;
        for (double x : spec.boundaries)
            if (v >= x) ++b;
        return b;
    };
    CHECK(bucketize(spec, 10.0) == 0);
    CHECK(bucketize(spec, 99.0) == 3);
    CHECK(bucketize(spec, 1e12) == 3);
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        double v = rng.uniform(0.5, 120.0);
        CHECK(bucketize(spec, v) == oracle(v));
    }
    CHECK_THROWS_AS(bucketize(spec, std::nan("")), InvariantError);
}

TEST_CASE("fit_buckets: degenerate inputs") {
    BucketSpec all_zero = fit_buckets("k", {0, 0, 0}, 4);
    CHECK(all_zero.boundaries.empty());
    CHECK(!all_zero.degenerate);

    BucketSpec one_value = fit_buckets("k", {7, 7, 7, 0}, 4);
    CHECK(one_value.degenerate);
    CHECK(one_value.n_buckets() == 1);
}

TEST_CASE("bucket balance: populations within +-1 on tie-free training data") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> values;
        int n = 200 + static_cast<int>(rng.uniform_u64(300));
        for (int i = 0; i < n; ++i) values.push_back(rng.uniform(0.001, 1000.0));
        int n_buckets = 2 + static_cast<int>(rng.uniform_u64(30));
        BucketSpec spec = fit_buckets("k", values, n_buckets);
        std::vector<int> pop(static_cast<size_t>(spec.n_buckets()), 0);
        for (double v : values) ++pop[static_cast<size_t>(bucketize(spec, v))];
        int mx = *std::max_element(pop.begin(), pop.end());
        int mn = *std::min_element(pop.begin(), pop.end());
        CHECK(mx - mn <= 1);
    }
}

TEST_CASE("classify_field thresholding") {
    CHECK(classify_field(16, 1000) == FittedKind::categorical);
    CHECK(classify_field(1000, 1000) == FittedKind::textual);  // boundary: strict <
    CHECK(classify_field(0, 1000) == FittedKind::categorical);
}

TEST_CASE("bpe: single merge on a trivial corpus") {
    std::vector<std::string> corpus(100, "aaaa");
    Bpe bpe = Bpe::train(corpus, 2);  // alphabet {a} + 1 merge
    REQUIRE(bpe.merges().size() == 1);
    CHECK(bpe.merges()[0].left == "a");
    CHECK(bpe.merges()[0].right == "a");
    auto toks = bpe.encode("aaaa");
    CHECK(toks.size() == 2);  // "aa","aa"
    CHECK(bpe.decode(toks) == "aaaa");
}

TEST_CASE("bpe: determinism, round trip, unknown bytes") {
    std::vector<std::string> corpus{"metal plan",  "metal plan",  "metal card", "basic plan",
                                    "premium plan", "metal metal", "plan b"};
    Bpe a = Bpe::train(corpus, 30);
    Bpe b = Bpe::train(corpus, 30);
    REQUIRE(a.merges().size() == b.merges().size());
    for (size_t i = 0; i < a.merges().size(); ++i) {
        CHECK(a.merges()[i].left == b.merges()[i].left);
        CHECK(a.merges()[i].right == b.merges()[i].right);
    }
    for (const auto& s : corpus) {
        auto toks = a.encode(s);
        CHECK(a.decode(toks) == s);
    }
    CHECK(a.encode("").empty());

    auto unk = a.encode("metal plan z9");  // 'z' and '9' unseen
    bool has_unknown = false;
    for (int32_t t : unk) has_unknown |= (t == Bpe::kUnknown);
    CHECK(has_unknown);

    CHECK_THROWS_AS(Bpe::train(corpus, 2), ConfigError);  // below alphabet size

    Bpe rebuilt = Bpe::from_parts(a.alphabet(), a.merges());
    for (const auto& s : corpus) CHECK(rebuilt.encode(s) == a.encode(s));
}

namespace {

CorpusConfig tok_config(int64_t users) {
    CorpusConfig cfg;
    cfg.n_users = users;
    cfg.t_from = 1672531200;
    cfg.t_to = cfg.t_from + 540 * 86400;
    cfg.events_log_mu = std::log(30.0);
    cfg.events_log_sigma = 0.8;
    cfg.n_merchants = 120;
    return cfg;
}

std::vector<UserRecord> make_records(const CorpusConfig& cfg, uint64_t seed) {
    std::vector<UserRecord> recs;
    generate_corpus(cfg, seed, [&](LabeledRecord&& r) { recs.push_back(std::move(r.record)); });
    return recs;
}

TokenizerConfig small_tok() {
    TokenizerConfig t;
    t.n_buckets = 16;
    t.cardinality_threshold = 100;
    t.bpe_vocab = 400;
    return t;
}

} // namespace

TEST_CASE("vocab: ids dense, specials disjoint, stability across fits") {
    CorpusConfig cfg = tok_config(60);
    auto recs = make_records(cfg, 13);
    Vocab v1 = fit_vocab(recs, small_tok());
    Vocab v2 = fit_vocab(recs, small_tok());
    CHECK(vocab_hash(v1) == vocab_hash(v2));

    // dense cover: every id in [0,total) is describable, exactly once
    std::set<int64_t> seen;
    for (const auto& [k, id] : v1.key_table) seen.insert(id);
    for (const auto& [k, base] : v1.bucket_base) {
        int64_t count = 1 + v1.bucket_specs.at(k).n_buckets();
        for (int64_t i = 0; i < count; ++i) seen.insert(base + i);
    }
    for (const auto& [val, id] : v1.cat_table) seen.insert(id);
    for (size_t i = 0; i < v1.bpe.vocab_size(); ++i)
        seen.insert(v1.bpe_base + static_cast<int64_t>(i));
    for (int64_t i = 0; i < Vocab::kNumSpecials; ++i) seen.insert(i);
    CHECK(static_cast<int64_t>(seen.size()) == v1.total);
    CHECK(*seen.rbegin() == v1.total - 1);

    // fitted kinds: amounts numerical, currencies categorical, merchants textual
    CHECK(v1.key_kind.at("Amount") == FittedKind::numerical);
    CHECK(v1.key_kind.at("Currency") == FittedKind::categorical);
    CHECK(v1.key_kind.at("Merchant") == FittedKind::textual);
    CHECK(v1.key_kind.at("Description") == FittedKind::textual);
}

TEST_CASE("vocab: save/load round trip with content hash") {
    CorpusConfig cfg = tok_config(40);
    auto recs = make_records(cfg, 29);
    Vocab v = fit_vocab(recs, small_tok());
    std::string path = (std::filesystem::temp_directory_path() / "evseq_vocab_test.tsv").string();
    save_vocab(v, path);
    Vocab back = load_vocab(path);
    CHECK(vocab_hash(back) == vocab_hash(v));
    CHECK(back.total == v.total);

    // corrupt a byte and expect the hash gate to fire
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        f.put('#');
    }
    CHECK_THROWS_AS(load_vocab(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("tokenize: positions, replication, times") {
    CorpusConfig cfg = tok_config(50);
    auto recs = make_records(cfg, 31);
    Vocab vocab = fit_vocab(recs, small_tok());

    // single-valued fields: both triples at position 0
    UserRecord tiny;
    tiny.record_id = "t0";
    tiny.evaluation_point = cfg.t_to;
    Event e;
    e.timestamp = cfg.t_to - 100;
    e.source = SourceType::transaction;
    e.fields = {{"Type", "card_payment"}, {"Currency", "eur"}};
    tiny.events = {e};
    TokenisedRecord tok = tokenize_record(tiny, vocab);
    REQUIRE(tok.events.size() == 1);
    REQUIRE(tok.events[0].triples.size() == 2);
    CHECK(tok.events[0].triples[0].pos == 0);
    CHECK(tok.events[0].triples[1].pos == 0);
    CHECK(tok.events[0].triples[0].key_id != tok.events[0].triples[1].key_id);
    // most recent event carries log_dt 0
    CHECK(tok.events[0].log_dt == 0.0);

    // multi-token textual field: replicated key id, positions 0..n-1
    UserRecord multi;
    multi.record_id = "t1";
    multi.evaluation_point = cfg.t_to;
    Event e2;
    e2.timestamp = cfg.t_to - 100;
    e2.source = SourceType::transaction;
    e2.fields = {{"Description", "payment at merchant_001 ref 4"}};
    multi.events = {e2};
    TokenisedRecord tok2 = tokenize_record(multi, vocab);
    const auto& triples = tok2.events[0].triples;
    REQUIRE(triples.size() >= 2);
    for (size_t i = 0; i < triples.size(); ++i) {
        CHECK(triples[i].key_id == triples[0].key_id);
        CHECK(triples[i].pos == static_cast<int16_t>(i));
    }

    // unknown categorical value -> UNK; unknown key -> error
    UserRecord unk;
    unk.record_id = "t2";
    unk.evaluation_point = cfg.t_to;
    Event e3;
    e3.timestamp = cfg.t_to - 5;
    e3.source = SourceType::transaction;
    e3.fields = {{"Currency", "xxx_not_seen"}};
    unk.events = {e3};
    TokenisedRecord tok3 = tokenize_record(unk, vocab);
    CHECK(tok3.events[0].triples[0].value_id == Vocab::kUnk);

    UserRecord drift;
    drift.record_id = "t3";
    drift.evaluation_point = cfg.t_to;
    Event e4;
    e4.timestamp = cfg.t_to - 5;
    e4.source = SourceType::transaction;
    e4.fields = {{"NotAKey", "zzz"}};
    drift.events = {e4};
    CHECK_THROWS_AS(tokenize_record(drift, vocab), InvariantError);
}

TEST_CASE("tokenize: lifelong profile times and event log_dt ordering") {
    CorpusConfig cfg = tok_config(30);
    auto recs = make_records(cfg, 37);
    Vocab vocab = fit_vocab(recs, small_tok());
    TokenisedRecord tok = tokenize_record(recs[0], vocab);

    REQUIRE(tok.profile.size() == tok.profile_times.size());
    // plain profile pairs come first with time 0
    CHECK(tok.profile_times[0] == 0.0);
    // at least one lifelong pair with positive soft-log distance
    bool has_positive = false;
    for (double t : tok.profile_times) has_positive |= t > 0.0;
    CHECK(has_positive);

    // events sorted -> log_dt nonincreasing in time, 0 for the last event
    CHECK(tok.events.back().log_dt == 0.0);
    for (const auto& e : tok.events) CHECK(e.log_dt >= 0.0);
}

TEST_CASE("round trip: in-vocabulary values recover exactly, numericals by interval") {
    CorpusConfig cfg = tok_config(50);
    auto recs = make_records(cfg, 41);
    Vocab vocab = fit_vocab(recs, small_tok());

    int checked = 0;
    for (int ri = 0; ri < 5; ++ri) {
        const UserRecord& rec = recs[static_cast<size_t>(ri)];
        TokenisedRecord tok = tokenize_record(rec, vocab);
        for (size_t ei = 0; ei < rec.events.size(); ++ei) {
            const Event& ev = rec.events[ei];
            const auto& triples = tok.events[ei].triples;
            size_t ti = 0;
            for (const auto& [key, value] : ev.fields) {
                auto kind = *vocab.kind_of(key);
                auto keyinfo = vocab.describe(triples[ti].key_id);
                CHECK(keyinfo.text == key);
                if (kind == FittedKind::categorical) {
                    auto vi = vocab.describe(triples[ti].value_id);
                    CHECK(vi.text == value);
                    ++ti;
                } else if (kind == FittedKind::numerical) {
                    double d = std::stod(value);
                    auto vi = vocab.describe(triples[ti].value_id);
                    if (d == 0.0) {
                        CHECK(vi.kind == Vocab::TokenInfo::Kind::bucket_zero);
                    } else {
                        CHECK(vi.kind == Vocab::TokenInfo::Kind::bucket);
                        CHECK(d >= vi.lo);
                        CHECK(d < vi.hi);
                    }
                    ++ti;
                } else {
                    // textual: collect this field's subword run (replicated key,
                    // positions 0,1,2,...)
                    std::string text;
                    int32_t kid = static_cast<int32_t>(vocab.key_id(key));
                    int16_t expect = 0;
                    while (ti < triples.size() && triples[ti].key_id == kid &&
                           triples[ti].pos == expect) {
                        auto vi = vocab.describe(triples[ti].value_id);
                        text += vi.text;
                        ++ti;
                        ++expect;
                    }
                    CHECK(text == value);
                }
                ++checked;
            }
        }
    }
    CHECK(checked > 100);
}
