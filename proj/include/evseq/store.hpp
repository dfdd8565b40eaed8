#pragma once
// Two-level on-disk layout: a user index keyed by record id (profile triples
// plus per-user token statistics) and event shards partitioned by event
// count, so every record inside an exact shard has the same number of events
// and the history stage runs rectangular. Counts above 512 fall into
// geometric bins to avoid a long tail of tiny files.
//
// Shards are columnar little-endian blocks with a checksummed payload; the
// index is a single sorted file loaded into memory for O(log n) lookup.

#include "evseq/common.hpp"
#include "evseq/tokenize.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

namespace evseq {

// ---------------------------------------------------------------------------
// Truncation

struct TruncationPolicy {
    int64_t max_event_tokens = 24;
    int64_t max_profile_tokens = 200;
    int64_t max_events = 6500;
};

struct TruncationStats {
    int64_t records_in = 0;
    int64_t records_dropped_zero_events = 0;
    int64_t events_token_clipped = 0;
    int64_t profiles_clipped = 0;
    int64_t records_event_subsampled = 0;
};

// Keeps leading triples per event (keys precede values), the leading profile
// triples, and the most recent events. Returns nullopt for zero-event records.
inline std::optional<TokenisedRecord> truncate_record(TokenisedRecord rec,
                                                      const TruncationPolicy& pol,
                                                      TruncationStats* stats = nullptr) {
    if (stats) ++stats->records_in;
    if (rec.events.empty()) {
        if (stats) ++stats->records_dropped_zero_events;
        return std::nullopt;
    }
    for (auto& e : rec.events) {
        if (static_cast<int64_t>(e.triples.size()) > pol.max_event_tokens) {
            e.triples.resize(static_cast<size_t>(pol.max_event_tokens));
            if (stats) ++stats->events_token_clipped;
        }
    }
    if (static_cast<int64_t>(rec.profile.size()) > pol.max_profile_tokens) {
        rec.profile.resize(static_cast<size_t>(pol.max_profile_tokens));
        rec.profile_times.resize(static_cast<size_t>(pol.max_profile_tokens));
        if (stats) ++stats->profiles_clipped;
    }
    if (static_cast<int64_t>(rec.events.size()) > pol.max_events) {
        // events are time-sorted ascending; most recent live at the tail
        rec.events.erase(rec.events.begin(),
                         rec.events.end() - static_cast<size_t>(pol.max_events));
        if (stats) ++stats->records_event_subsampled;
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Shard partitioning

struct ShardKey {
    int64_t lo = 0, hi = 0;  // inclusive event-count range; lo == hi for exact shards

    bool exact() const { return lo == hi; }
    bool operator<(const ShardKey& o) const { return lo < o.lo; }
    bool operator==(const ShardKey& o) const { return lo == o.lo && hi == o.hi; }
};

inline ShardKey shard_key_for(int64_t event_count, int64_t exact_limit = 512,
                              double bin_growth = 1.25) {
    if (event_count <= exact_limit) return {event_count, event_count};
    // edges grow geometrically from the exact limit: (512,640], (640,800], ...
    int64_t edge = exact_limit;
    while (true) {
        int64_t next = static_cast<int64_t>(std::ceil(static_cast<double>(edge) * bin_growth));
        if (event_count <= next) return {edge + 1, next};
        edge = next;
    }
}

// ---------------------------------------------------------------------------
// User index

struct UserIndexEntry {
    std::string record_id;
    std::vector<TokenTriple> profile;
    std::vector<double> profile_times;
    int64_t profile_token_count = 0;
    int64_t event_count = 0;
    int64_t total_event_tokens = 0;

    int64_t footprint() const { return profile_token_count + total_event_tokens; }
};

inline constexpr char kIndexMagic[9] = "EVIDX001";
inline constexpr char kShardMagic[9] = "EVSHRD01";

class UserIndex {
public:
    static void write(std::vector<UserIndexEntry> entries, const std::string& path) {
        std::sort(entries.begin(), entries.end(),
                  [](const UserIndexEntry& a, const UserIndexEntry& b) {
                      return a.record_id < b.record_id;
                  });
        for (size_t i = 1; i < entries.size(); ++i)
            if (entries[i].record_id == entries[i - 1].record_id)
                throw InvariantError("duplicate record id in index: " + entries[i].record_id);

        std::ostringstream payload(std::ios::binary);
        write_pod<uint64_t>(payload, entries.size());
        for (const auto& e : entries) {
            write_string(payload, e.record_id);
            write_pod<uint64_t>(payload, e.profile.size());
            for (const auto& t : e.profile) {
                write_pod<int32_t>(payload, t.key_id);
                write_pod<int32_t>(payload, t.value_id);
                write_pod<int16_t>(payload, t.pos);
            }
            write_vec<double>(payload, e.profile_times);
            write_pod<int64_t>(payload, e.profile_token_count);
            write_pod<int64_t>(payload, e.event_count);
            write_pod<int64_t>(payload, e.total_event_tokens);
        }
        std::string bytes = payload.str();

        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open for write: " + path);
        write_bytes(os, kIndexMagic, 8);
        write_pod<uint32_t>(os, 1);  // version
        Fnv1a64 h;
        h.update(bytes.data(), bytes.size());
        write_pod<uint64_t>(os, h.digest());
        write_bytes(os, bytes.data(), bytes.size());
    }

    static UserIndex load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open: " + path);
        char magic[8];
        read_bytes(is, magic, 8);
        if (std::string_view(magic, 8) != std::string_view(kIndexMagic, 8))
            throw IoError("bad index magic");
        uint32_t version = read_pod<uint32_t>(is);
        if (version != 1) throw IoError("unsupported index version");
        uint64_t expect_hash = read_pod<uint64_t>(is);
        std::stringstream rest(std::ios::binary | std::ios::in | std::ios::out);
        rest << is.rdbuf();
        std::string bytes = rest.str();
        Fnv1a64 h;
        h.update(bytes.data(), bytes.size());
        if (h.digest() != expect_hash) throw IoError("index checksum mismatch: " + path);

        std::istringstream ps(bytes, std::ios::binary);
        UserIndex idx;
        uint64_t n = read_pod<uint64_t>(ps);
        idx.entries_.reserve(n);
        for (uint64_t i = 0; i < n; ++i) {
            UserIndexEntry e;
            e.record_id = read_string(ps);
            uint64_t np = read_pod<uint64_t>(ps);
            e.profile.resize(np);
            for (auto& t : e.profile) {
                t.key_id = read_pod<int32_t>(ps);
                t.value_id = read_pod<int32_t>(ps);
                t.pos = read_pod<int16_t>(ps);
            }
            e.profile_times = read_vec<double>(ps);
            e.profile_token_count = read_pod<int64_t>(ps);
            e.event_count = read_pod<int64_t>(ps);
            e.total_event_tokens = read_pod<int64_t>(ps);
            if (e.profile_token_count != static_cast<int64_t>(e.profile.size()))
                throw IoError("index entry statistics inconsistent: " + e.record_id);
            idx.entries_.push_back(std::move(e));
        }
        return idx;
    }

    // nullptr means not-found; corruption surfaces as IoError at load time
    const UserIndexEntry* find(const std::string& record_id) const {
        auto it = std::lower_bound(entries_.begin(), entries_.end(), record_id,
                                   [](const UserIndexEntry& e, const std::string& id) {
                                       return e.record_id < id;
                                   });
        if (it == entries_.end() || it->record_id != record_id) return nullptr;
        return &*it;
    }

    const std::vector<UserIndexEntry>& entries() const { return entries_; }

private:
    std::vector<UserIndexEntry> entries_;
};

// ---------------------------------------------------------------------------
// Event shards

struct ShardData {
    ShardKey key;
    std::vector<std::string> record_ids;
    std::vector<int64_t> rec_event_offsets;    // n_records + 1, over events
    std::vector<int64_t> event_token_offsets;  // n_events + 1, over flat tokens
    std::vector<int64_t> event_timestamps;
    std::vector<double> event_log_dt;
    std::vector<double> event_hour, event_dow, event_dom;
    std::vector<int32_t> key_ids, value_ids;
    std::vector<int16_t> positions;

    int64_t n_records() const { return static_cast<int64_t>(record_ids.size()); }
    int64_t n_events() const { return rec_event_offsets.empty() ? 0 : rec_event_offsets.back(); }
    int64_t n_tokens() const { return event_token_offsets.empty() ? 0 : event_token_offsets.back(); }

    void append(const TokenisedRecord& rec) {
        if (rec_event_offsets.empty()) rec_event_offsets.push_back(0);
        if (event_token_offsets.empty()) event_token_offsets.push_back(0);
        record_ids.push_back(rec.record_id);
        for (const auto& e : rec.events) {
            event_timestamps.push_back(e.timestamp);
            event_log_dt.push_back(e.log_dt);
            event_hour.push_back(e.cal.hour);
            event_dow.push_back(e.cal.dow);
            event_dom.push_back(e.cal.dom);
            for (const auto& t : e.triples) {
                key_ids.push_back(t.key_id);
                value_ids.push_back(t.value_id);
                positions.push_back(t.pos);
            }
            event_token_offsets.push_back(static_cast<int64_t>(key_ids.size()));
        }
        rec_event_offsets.push_back(static_cast<int64_t>(event_timestamps.size()));
    }

    // reconstruct one record's event block (no profile; that lives in the index)
    TokenisedRecord record(int64_t r) const {
        TokenisedRecord rec;
        rec.record_id = record_ids[static_cast<size_t>(r)];
        for (int64_t e = rec_event_offsets[r]; e < rec_event_offsets[r + 1]; ++e) {
            TokenisedEvent te;
            te.timestamp = event_timestamps[static_cast<size_t>(e)];
            te.log_dt = event_log_dt[static_cast<size_t>(e)];
            te.cal = {event_hour[static_cast<size_t>(e)], event_dow[static_cast<size_t>(e)],
                      event_dom[static_cast<size_t>(e)]};
            for (int64_t t = event_token_offsets[e]; t < event_token_offsets[e + 1]; ++t)
                te.triples.push_back({key_ids[static_cast<size_t>(t)],
                                      value_ids[static_cast<size_t>(t)],
                                      positions[static_cast<size_t>(t)]});
            rec.events.push_back(std::move(te));
        }
        return rec;
    }

    void validate() const {
        for (size_t i = 1; i < event_token_offsets.size(); ++i)
            if (event_token_offsets[i] < event_token_offsets[i - 1])
                throw InvariantError("shard: token offsets not monotone");
        if (key.exact())
            for (int64_t r = 0; r < n_records(); ++r)
                if (rec_event_offsets[r + 1] - rec_event_offsets[r] != key.lo)
                    throw InvariantError("shard: record breaks rectangularity");
    }
};

inline std::string shard_filename(const ShardKey& k) {
    char buf[64];
    if (k.exact()) snprintf(buf, sizeof(buf), "shard_%06lld.bin", static_cast<long long>(k.lo));
    else snprintf(buf, sizeof(buf), "shard_bin_%06lld_%06lld.bin", static_cast<long long>(k.lo),
                  static_cast<long long>(k.hi));
    return buf;
}

inline void write_shard(const ShardData& shard, const std::string& path) {
    std::ostringstream payload(std::ios::binary);
    write_pod<uint64_t>(payload, shard.record_ids.size());
    for (const auto& id : shard.record_ids) write_string(payload, id);
    write_vec<int64_t>(payload, shard.rec_event_offsets);
    write_vec<int64_t>(payload, shard.event_token_offsets);
    write_vec<int64_t>(payload, shard.event_timestamps);
    write_vec<double>(payload, shard.event_log_dt);
    write_vec<double>(payload, shard.event_hour);
    write_vec<double>(payload, shard.event_dow);
    write_vec<double>(payload, shard.event_dom);
    write_vec<int32_t>(payload, shard.key_ids);
    write_vec<int32_t>(payload, shard.value_ids);
    write_vec<int16_t>(payload, shard.positions);
    std::string bytes = payload.str();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_bytes(os, kShardMagic, 8);
    write_pod<uint32_t>(os, 1);
    write_pod<int64_t>(os, shard.key.lo);
    write_pod<int64_t>(os, shard.key.hi);
    write_pod<uint64_t>(os, shard.record_ids.size());
    Fnv1a64 h;
    h.update(bytes.data(), bytes.size());
    write_pod<uint64_t>(os, h.digest());
    write_bytes(os, bytes.data(), bytes.size());
}

inline ShardData read_shard(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    read_bytes(is, magic, 8);
    if (std::string_view(magic, 8) != std::string_view(kShardMagic, 8))
        throw IoError("bad shard magic: " + path);
    uint32_t version = read_pod<uint32_t>(is);
    if (version != 1) throw IoError("unsupported shard version");
    ShardData shard;
    shard.key.lo = read_pod<int64_t>(is);
    shard.key.hi = read_pod<int64_t>(is);
    uint64_t n_records = read_pod<uint64_t>(is);
    uint64_t expect_hash = read_pod<uint64_t>(is);

    std::stringstream rest(std::ios::binary | std::ios::in | std::ios::out);
    rest << is.rdbuf();
    std::string bytes = rest.str();
    Fnv1a64 h;
    h.update(bytes.data(), bytes.size());
    if (h.digest() != expect_hash) throw IoError("shard checksum mismatch: " + path);

    std::istringstream ps(bytes, std::ios::binary);
    uint64_t n = read_pod<uint64_t>(ps);
    if (n != n_records) throw IoError("shard record count mismatch");
    shard.record_ids.resize(n);
    for (auto& id : shard.record_ids) id = read_string(ps);
    shard.rec_event_offsets = read_vec<int64_t>(ps);
    shard.event_token_offsets = read_vec<int64_t>(ps);
    shard.event_timestamps = read_vec<int64_t>(ps);
    shard.event_log_dt = read_vec<double>(ps);
    shard.event_hour = read_vec<double>(ps);
    shard.event_dow = read_vec<double>(ps);
    shard.event_dom = read_vec<double>(ps);
    shard.key_ids = read_vec<int32_t>(ps);
    shard.value_ids = read_vec<int32_t>(ps);
    shard.positions = read_vec<int16_t>(ps);
    shard.validate();
    return shard;
}

// ---------------------------------------------------------------------------
// Store: build and open a directory of index + shards

struct StoreStats {
    TruncationStats truncation;
    int64_t records_stored = 0;
    int64_t shard_count = 0;
};

class StoreBuilder {
public:
    explicit StoreBuilder(std::string dir, TruncationPolicy policy = {})
        : dir_(std::move(dir)), policy_(policy) {
        std::filesystem::create_directories(dir_);
    }

    // truncates, drops zero-event records, groups by shard key
    void add(TokenisedRecord rec) {
        if (!ids_.insert(rec.record_id).second)
            throw InvariantError("duplicate record id: " + rec.record_id);
        auto truncated = truncate_record(std::move(rec), policy_, &stats_.truncation);
        if (!truncated) return;
        UserIndexEntry entry;
        entry.record_id = truncated->record_id;
        entry.profile = truncated->profile;
        entry.profile_times = truncated->profile_times;
        entry.profile_token_count = truncated->profile_token_count();
        entry.event_count = truncated->event_count();
        entry.total_event_tokens = truncated->total_event_tokens();
        index_.push_back(std::move(entry));
        shards_[shard_key_for(truncated->event_count())].append(*truncated);
        ++stats_.records_stored;
    }

    StoreStats finalize() {
        for (auto& [key, shard] : shards_) {
            shard.key = key;
            shard.validate();
            write_shard(shard, (std::filesystem::path(dir_) / shard_filename(key)).string());
        }
        stats_.shard_count = static_cast<int64_t>(shards_.size());
        UserIndex::write(std::move(index_), (std::filesystem::path(dir_) / "user_index.bin").string());
        return stats_;
    }

private:
    std::string dir_;
    TruncationPolicy policy_;
    std::set<std::string> ids_;
    std::vector<UserIndexEntry> index_;
    std::map<ShardKey, ShardData> shards_;
    StoreStats stats_;
};

struct ShardInfo {
    ShardKey key;
    std::string path;
};

class Store {
public:
    static Store open(const std::string& dir) {
        Store s;
        s.dir_ = dir;
        s.index_ = UserIndex::load((std::filesystem::path(dir) / "user_index.bin").string());
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            std::string name = entry.path().filename().string();
            if (name.rfind("shard_", 0) != 0) continue;
            long long lo = 0, hi = 0;
            if (sscanf(name.c_str(), "shard_bin_%lld_%lld.bin", &lo, &hi) == 2)
                s.shards_.push_back({{lo, hi}, entry.path().string()});
            else if (sscanf(name.c_str(), "shard_%lld.bin", &lo) == 1)
                s.shards_.push_back({{lo, lo}, entry.path().string()});
        }
        std::sort(s.shards_.begin(), s.shards_.end(),
                  [](const ShardInfo& a, const ShardInfo& b) { return a.key < b.key; });
        return s;
    }

    const UserIndex& index() const { return index_; }
    const std::vector<ShardInfo>& shards() const { return shards_; }

    ShardData load(const ShardInfo& info) const { return read_shard(info.path); }

    // checksum + structural pass over everything; throws on corruption
    void verify() const {
        for (const auto& info : shards_) {
            ShardData s = read_shard(info.path);
            if (!(s.key == info.key)) throw IoError("shard key/filename mismatch: " + info.path);
            for (int64_t r = 0; r < s.n_records(); ++r) {
                int64_t count = s.rec_event_offsets[r + 1] - s.rec_event_offsets[r];
                if (count < s.key.lo || count > s.key.hi)
                    throw InvariantError("record outside shard range: " + s.record_ids[r]);
                const UserIndexEntry* e = index_.find(s.record_ids[static_cast<size_t>(r)]);
                if (!e) throw InvariantError("shard record missing from index: " +
                                             s.record_ids[static_cast<size_t>(r)]);
                if (e->event_count != count)
                    throw InvariantError("index/shard event count mismatch: " + e->record_id);
            }
        }
    }

private:
    std::string dir_;
    UserIndex index_;
    std::vector<ShardInfo> shards_;
};

} // namespace evseq
