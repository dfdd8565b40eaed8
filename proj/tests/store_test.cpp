#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "evseq/store.hpp"

#include <filesystem>

using namespace evseq;

namespace {

TokenisedRecord make_record(const std::string& id, int n_events, int tokens_per_event,
                            int profile_tokens = 5) {
    TokenisedRecord rec;
    rec.record_id = id;
    for (int i = 0; i < profile_tokens; ++i) {
        rec.profile.push_back({static_cast<int32_t>(10 + i), static_cast<int32_t>(100 + i), 0});
        rec.profile_times.push_back(i == 0 ? 42.5 : 0.0);
    }
    for (int e = 0; e < n_events; ++e) {
        TokenisedEvent ev;
        ev.timestamp = 1000000 + e * 3600;
        ev.log_dt = static_cast<double>(n_events - 1 - e);
        ev.cal = {0.1 * e, 0.2, 0.3};
        for (int t = 0; t < tokens_per_event; ++t)
            ev.triples.push_back({static_cast<int32_t>(20 + t), static_cast<int32_t>(200 + t),
                                  static_cast<int16_t>(t % 3)});
        rec.events.push_back(std::move(ev));
    }
    return rec;
}

std::string temp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

} // namespace

TEST_CASE("truncation: per-event, profile, event-count, zero-event paths") {
    TruncationPolicy pol;
    TruncationStats stats;

    auto big = make_record("r1", 3, 30);
    auto t1 = truncate_record(big, pol, &stats);
    REQUIRE(t1.has_value());
    for (const auto& e : t1->events) CHECK((int64_t)e.triples.size() == 24);
    // leading triples kept
    CHECK(t1->events[0].triples[0].value_id == 200);
    CHECK(stats.events_token_clipped == 3);

    auto many = make_record("r2", 7000, 2);
    auto t2 = truncate_record(many, pol, &stats);
    REQUIRE(t2.has_value());
    CHECK(t2->event_count() == 6500);
    // most recent kept: the tail of the sorted list
    CHECK(t2->events.back().timestamp == many.events.back().timestamp);
    CHECK(t2->events.front().timestamp == many.events[7000 - 6500].timestamp);

    auto empty = make_record("r3", 0, 0);
    auto t3 = truncate_record(empty, pol, &stats);
    CHECK(!t3.has_value());
    CHECK(stats.records_dropped_zero_events == 1);

    auto fat_profile = make_record("r4", 1, 2, 300);
    auto t4 = truncate_record(fat_profile, pol, &stats);
    CHECK(t4->profile.size() == 200);
    CHECK(t4->profile_times.size() == 200);
}

TEST_CASE("truncation is idempotent") {
    TruncationPolicy pol;
    auto rec = make_record("r", 7000, 30, 250);
    auto once = truncate_record(rec, pol);
    REQUIRE(once.has_value());
    auto twice = truncate_record(*once, pol);
    REQUIRE(twice.has_value());
    CHECK(twice->event_count() == once->event_count());
    CHECK(twice->total_event_tokens() == once->total_event_tokens());
    CHECK(twice->profile.size() == once->profile.size());
}

TEST_CASE("shard keys: exact up to 512, geometric bins above") {
    CHECK(shard_key_for(1) == ShardKey{1, 1});
    CHECK(shard_key_for(512) == ShardKey{512, 512});
    ShardKey k = shard_key_for(513);
    CHECK(k.lo == 513);
    CHECK(k.hi == 640);  // ceil(513 * 1.25)
    CHECK(shard_key_for(640) == k);
    ShardKey k2 = shard_key_for(641);
    CHECK(k2.lo == 641);
    CHECK(k2.hi >= 800);
    // bins partition: every count lands in exactly one bin
    for (int64_t c = 513; c < 7000; c += 37) {
        ShardKey b = shard_key_for(c);
        CHECK(b.lo <= c);
        CHECK(c <= b.hi);
    }
}

TEST_CASE("store build: partition, lookup, round trip, determinism") {
    std::string dir = temp_dir("evseq_store_test");
    {
        StoreBuilder b(dir);
        b.add(make_record("u1", 3, 4));
        b.add(make_record("u2", 3, 6));
        b.add(make_record("u3", 7, 2));
        b.add(make_record("u4", 0, 0));  // dropped
        StoreStats st = b.finalize();
        CHECK(st.records_stored == 3);
        CHECK(st.shard_count == 2);  // counts {3, 7}
        CHECK(st.truncation.records_dropped_zero_events == 1);
    }
    Store store = Store::open(dir);
    REQUIRE(store.shards().size() == 2);
    CHECK(store.shards()[0].key == ShardKey{3, 3});
    CHECK(store.shards()[1].key == ShardKey{7, 7});

    ShardData s3 = store.load(store.shards()[0]);
    CHECK(s3.n_records() == 2);
    ShardData s7 = store.load(store.shards()[1]);
    CHECK(s7.n_records() == 1);

    // index lookup, present and missing
    const UserIndexEntry* e = store.index().find("u2");
    REQUIRE(e != nullptr);
    CHECK(e->event_count == 3);
    CHECK(e->total_event_tokens == 18);
    CHECK(e->profile.size() == 5);
    CHECK(e->profile_times[0] == 42.5);
    CHECK(store.index().find("nope") == nullptr);

    // bit-exact record round trip through the shard
    TokenisedRecord orig = make_record("u2", 3, 6);
    TokenisedRecord back = s3.record(1);  // ids sorted by insertion: u1 then u2
    CHECK(back.record_id == "u2");
    REQUIRE(back.events.size() == orig.events.size());
    for (size_t i = 0; i < back.events.size(); ++i) {
        CHECK(back.events[i].timestamp == orig.events[i].timestamp);
        CHECK(back.events[i].log_dt == orig.events[i].log_dt);
        CHECK(back.events[i].cal.hour == orig.events[i].cal.hour);
        REQUIRE(back.events[i].triples.size() == orig.events[i].triples.size());
        for (size_t t = 0; t < back.events[i].triples.size(); ++t) {
            CHECK(back.events[i].triples[t].key_id == orig.events[i].triples[t].key_id);
            CHECK(back.events[i].triples[t].value_id == orig.events[i].triples[t].value_id);
            CHECK(back.events[i].triples[t].pos == orig.events[i].triples[t].pos);
        }
    }

    CHECK_NOTHROW(store.verify());

    // rebuild determinism: identical bytes
    std::string dir2 = temp_dir("evseq_store_test2");
    {
        StoreBuilder b(dir2);
        b.add(make_record("u1", 3, 4));
        b.add(make_record("u2", 3, 6));
        b.add(make_record("u3", 7, 2));
        b.add(make_record("u4", 0, 0));
        b.finalize();
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        auto other = std::filesystem::path(dir2) / entry.path().filename();
        std::ifstream a(entry.path(), std::ios::binary), b2(other, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b2)), {});
        CHECK(sa == sb);
    }

    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("duplicate ids rejected; corruption detected") {
    std::string dir = temp_dir("evseq_store_dup");
    StoreBuilder b(dir);
    b.add(make_record("u1", 2, 3));
    CHECK_THROWS_AS(b.add(make_record("u1", 4, 2)), InvariantError);
    b.finalize();

    // flip a payload byte in the shard and expect checksum failure
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().filename().string().rfind("shard_", 0) != 0) continue;
        auto sz = std::filesystem::file_size(entry.path());
        std::fstream f(entry.path(), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(sz - 3));
        char c;
        f.seekg(static_cast<std::streamoff>(sz - 3));
        f.get(c);
        f.seekp(static_cast<std::streamoff>(sz - 3));
        f.put(static_cast<char>(c ^ 0x5a));
        f.close();
        CHECK_THROWS_AS(read_shard(entry.path().string()), IoError);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("rectangularity: exact shards enforce one event count") {
    ShardData s;
    s.key = {3, 3};
    s.append(make_record("a", 3, 2));
    s.append(make_record("b", 3, 5));
    CHECK_NOTHROW(s.validate());
    s.append(make_record("c", 4, 2));
    CHECK_THROWS_AS(s.validate(), InvariantError);
}
