#pragma once
// Shared key/value vocabulary. One dense id space serves keys and values so a
// single embedding table backs both: [specials][keys][bucket tokens]
// [categorical tokens][subword tokens]. Field kinds are fitted from training
// data: a key whose every value parses as a finite double is numerical;
// remaining string keys split categorical/textual by cardinality threshold.

#include "evseq/bpe.hpp"
#include "evseq/buckets.hpp"
#include "evseq/common.hpp"
#include "evseq/corpus.hpp"

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace evseq {

enum class FittedKind { numerical, categorical, textual };

inline const char* kind_name(FittedKind k) {
    switch (k) {
        case FittedKind::numerical: return "numerical";
        case FittedKind::categorical: return "categorical";
        case FittedKind::textual: return "textual";
    }
    return "?";
}

// cardinality thresholding over the training split; strict less-than
inline FittedKind classify_field(int64_t distinct_count, int64_t threshold) {
    return distinct_count < threshold ? FittedKind::categorical : FittedKind::textual;
}

struct TokenizerConfig {
    int n_buckets = 64;                 // plus the zero bucket per numerical key
    int64_t cardinality_threshold = 1000;
    int64_t bpe_vocab = 4096;           // alphabet + merges
};

struct Vocab {
    static constexpr int64_t kPad = 0, kMask = 1, kUnk = 2, kUsr = 3, kEvt = 4;
    static constexpr int64_t kNumSpecials = 5;
    static constexpr int kVersion = 1;

    std::map<std::string, int64_t> key_table;
    std::map<std::string, FittedKind> key_kind;
    std::map<std::string, BucketSpec> bucket_specs;      // numerical keys
    std::map<std::string, int64_t> bucket_base;          // key -> id of zero token
    std::map<std::string, int64_t> cat_table;            // value string -> id
    Bpe bpe;
    int64_t bpe_base = 0;                                // id of bpe token 0
    int64_t total = 0;

    int64_t size() const { return total; }

    int64_t key_id(const std::string& key) const {
        auto it = key_table.find(key);
        if (it == key_table.end()) throw InvariantError("unknown key (schema drift): " + key);
        return it->second;
    }

    std::optional<FittedKind> kind_of(const std::string& key) const {
        auto it = key_kind.find(key);
        if (it == key_kind.end()) return std::nullopt;
        return it->second;
    }

    // zero -> zero token; otherwise bucket i maps to base + 1 + i
    int64_t bucket_token(const std::string& key, double v) const {
        const BucketSpec& spec = bucket_specs.at(key);
        int64_t base = bucket_base.at(key);
        if (v == 0.0) return base;
        return base + 1 + bucketize(spec, v);
    }

    int64_t cat_token(const std::string& value) const {
        auto it = cat_table.find(value);
        return it == cat_table.end() ? kUnk : it->second;
    }

    std::vector<int64_t> text_tokens(const std::string& value) const {
        std::vector<int64_t> out;
        for (int32_t t : bpe.encode(value))
            out.push_back(t == Bpe::kUnknown ? kUnk : bpe_base + t);
        return out;
    }

    // --- reverse lookups (detokenisation) --------------------------------
    struct TokenInfo {
        enum class Kind { special, key, bucket_zero, bucket, categorical, subword } kind;
        std::string text;      // key name, value string, subword bytes
        std::string key;       // owning key for bucket tokens
        int bucket_index = -1; // -1 for zero token
        double lo = 0, hi = 0; // bucket interval (lo = -inf/0 handled by flags)
    };

    TokenInfo describe(int64_t id) const {
        TokenInfo info{};
        if (id < kNumSpecials) {
            info.kind = TokenInfo::Kind::special;
            static const char* names[] = {"[PAD]", "[MASK]", "[UNK]", "[USR]", "[EVT]"};
            info.text = names[id];
            return info;
        }
        for (const auto& [k, v] : key_table)
            if (v == id) {
                info.kind = TokenInfo::Kind::key;
                info.text = k;
                return info;
            }
        for (const auto& [k, base] : bucket_base) {
            const BucketSpec& spec = bucket_specs.at(k);
            int64_t count = 1 + spec.n_buckets();
            if (id >= base && id < base + count) {
                info.key = k;
                if (id == base) {
                    info.kind = TokenInfo::Kind::bucket_zero;
                    info.text = "0";
                } else {
                    info.kind = TokenInfo::Kind::bucket;
                    info.bucket_index = static_cast<int>(id - base - 1);
                    const auto& b = spec.boundaries;
                    info.lo = info.bucket_index == 0 ? -std::numeric_limits<double>::infinity()
                                                     : b[info.bucket_index - 1];
                    info.hi = info.bucket_index == spec.n_buckets() - 1
                                  ? std::numeric_limits<double>::infinity()
                                  : b[info.bucket_index];
                }
                return info;
            }
        }
        for (const auto& [v, vid] : cat_table)
            if (vid == id) {
                info.kind = TokenInfo::Kind::categorical;
                info.text = v;
                return info;
            }
        if (id >= bpe_base && id < bpe_base + static_cast<int64_t>(bpe.vocab_size())) {
            info.kind = TokenInfo::Kind::subword;
            info.text = bpe.tokens()[static_cast<size_t>(id - bpe_base)];
            return info;
        }
        throw InvariantError("token id out of range: " + std::to_string(id));
    }
};

// ---------------------------------------------------------------------------
// Fitting

namespace vocab_detail {

struct KeyStats {
    bool all_numeric = true;
    int64_t n_values = 0;
    std::set<std::string> distinct;
    std::vector<double> numeric_values;
};

inline bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

} // namespace vocab_detail

// Single-writer fitting pass over the training records; encoding afterwards is
// stateless and shareable across threads.
inline Vocab fit_vocab(const std::vector<UserRecord>& records, const TokenizerConfig& cfg,
                       std::vector<std::string>* warnings = nullptr) {
    using vocab_detail::KeyStats;
    std::map<std::string, KeyStats> stats;

    auto feed = [&](const std::string& key, const std::string& value) {
        KeyStats& ks = stats[key];
        ++ks.n_values;
        double d;
        if (vocab_detail::parse_double(value, d)) ks.numeric_values.push_back(d);
        else ks.all_numeric = false;
        ks.distinct.insert(value);
    };

    for (const auto& rec : records) {
        for (const auto& [k, v] : rec.profile_state) feed(k, v);
        for (const auto& [k, v, t] : rec.lifelong_events) {
            (void)t;
            feed(k, v);
        }
        for (const auto& e : rec.events)
            for (const auto& [k, v] : e.fields) feed(k, v);
    }

    Vocab vocab;
    int64_t next = Vocab::kNumSpecials;

    for (auto& [key, ks] : stats) {
        vocab.key_table[key] = next++;
        if (ks.all_numeric && !ks.numeric_values.empty()) {
            vocab.key_kind[key] = FittedKind::numerical;
        } else {
            FittedKind kind = classify_field(static_cast<int64_t>(ks.distinct.size()),
                                             cfg.cardinality_threshold);
            vocab.key_kind[key] = kind;
        }
    }

    // bucket tokens, per numerical key in name order
    for (auto& [key, ks] : stats) {
        if (vocab.key_kind[key] != FittedKind::numerical) continue;
        BucketSpec spec = fit_buckets(key, ks.numeric_values, cfg.n_buckets);
        if (spec.degenerate && warnings)
            warnings->push_back("bucket fit degenerate (single distinct nonzero value): " + key);
        vocab.bucket_base[key] = next;
        next += 1 + spec.n_buckets();  // zero token + value buckets
        vocab.bucket_specs[key] = std::move(spec);
    }

    // categorical tokens: global table over value strings, name order
    std::set<std::string> cat_values;
    for (auto& [key, ks] : stats)
        if (vocab.key_kind[key] == FittedKind::categorical)
            for (const auto& v : ks.distinct) cat_values.insert(v);
    for (const auto& v : cat_values) vocab.cat_table[v] = next++;

    // subword tokens from the pooled textual corpus
    std::vector<std::string> text_corpus;
    for (auto& [key, ks] : stats)
        if (vocab.key_kind[key] == FittedKind::textual)
            for (const auto& v : ks.distinct) text_corpus.push_back(v);
    std::sort(text_corpus.begin(), text_corpus.end());
    if (!text_corpus.empty()) {
        vocab.bpe = Bpe::train(text_corpus, cfg.bpe_vocab);
        vocab.bpe_base = next;
        next += static_cast<int64_t>(vocab.bpe.vocab_size());
    } else {
        vocab.bpe_base = next;
    }

    vocab.total = next;
    return vocab;
}

// ---------------------------------------------------------------------------
// Persistence: tab-separated text with a version header and a trailing
// content hash. Byte strings (BPE tokens) are hex-encoded.

inline std::string to_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(s.size() * 2);
    for (unsigned char c : s) {
        out += digits[c >> 4];
        out += digits[c & 15];
    }
    return out;
}

inline std::string from_hex(const std::string& s) {
    if (s.size() % 2) throw IoError("bad hex string");
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw IoError("bad hex digit");
    };
    std::string out;
    out.reserve(s.size() / 2);
    for (size_t i = 0; i < s.size(); i += 2)
        out += static_cast<char>((nib(s[i]) << 4) | nib(s[i + 1]));
    return out;
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
    std::ostringstream body;
    auto emit = [&](const std::string& line) { body << line << "\n"; };
    char buf[512];
    for (const auto& [k, id] : vocab.key_table) {
        snprintf(buf, sizeof(buf), "key\t%s\t%lld\t%s", k.c_str(), static_cast<long long>(id),
                 kind_name(vocab.key_kind.at(k)));
        emit(buf);
    }
    for (const auto& [k, base] : vocab.bucket_base) {
        const BucketSpec& spec = vocab.bucket_specs.at(k);
        std::ostringstream line;
        line << "buckets\t" << k << "\t" << base << "\t" << (spec.degenerate ? 1 : 0);
        for (double b : spec.boundaries) {
            snprintf(buf, sizeof(buf), "%.17g", b);
            line << "\t" << buf;
        }
        emit(line.str());
    }
    for (const auto& [v, id] : vocab.cat_table) {
        if (v.find('\t') != std::string::npos || v.find('\n') != std::string::npos)
            throw IoError("categorical value contains separator: " + v);
        snprintf(buf, sizeof(buf), "cat\t%s\t%lld", v.c_str(), static_cast<long long>(id));
        emit(buf);
    }
    {
        std::ostringstream line;
        line << "bpe_base\t" << vocab.bpe_base;
        emit(line.str());
    }
    for (const auto& a : vocab.bpe.alphabet()) emit("bpe_alpha\t" + to_hex(a));
    for (const auto& m : vocab.bpe.merges())
        emit("bpe_merge\t" + to_hex(m.left) + "\t" + to_hex(m.right));
    {
        std::ostringstream line;
        line << "total\t" << vocab.total;
        emit(line.str());
    }

    std::string payload = body.str();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "evseq-vocab v" << Vocab::kVersion << "\n";
    os << payload;
    os << "hash\t" << fnv1a64(payload) << "\n";
    if (!os) throw IoError("vocab write failed");
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line.rfind("evseq-vocab v", 0) != 0)
        throw IoError("bad vocab header");

    Vocab vocab;
    std::string payload;
    std::vector<std::string> alphabet;
    std::vector<Bpe::Merge> merges;
    std::map<std::string, std::pair<int64_t, BucketSpec>> buckets;
    bool hash_seen = false;

    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> parts;
        size_t start = 0;
        while (true) {
            size_t tab = line.find('\t', start);
            parts.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        const std::string& tag = parts[0];
        if (tag == "hash") {
            if (std::stoull(parts.at(1)) != fnv1a64(payload))
                throw IoError("vocab content hash mismatch: " + path);
            hash_seen = true;
            continue;
        }
        payload += line + "\n";
        if (tag == "key") {
            vocab.key_table[parts.at(1)] = std::stoll(parts.at(2));
            const std::string& kn = parts.at(3);
            vocab.key_kind[parts.at(1)] = kn == "numerical"     ? FittedKind::numerical
                                           : kn == "categorical" ? FittedKind::categorical
                                                                 : FittedKind::textual;
        } else if (tag == "buckets") {
            BucketSpec spec;
            spec.key_name = parts.at(1);
            spec.degenerate = parts.at(3) == "1";
            for (size_t i = 4; i < parts.size(); ++i) spec.boundaries.push_back(std::stod(parts[i]));
            buckets[parts.at(1)] = {std::stoll(parts.at(2)), std::move(spec)};
        } else if (tag == "cat") {
            vocab.cat_table[parts.at(1)] = std::stoll(parts.at(2));
        } else if (tag == "bpe_base") {
            vocab.bpe_base = std::stoll(parts.at(1));
        } else if (tag == "bpe_alpha") {
            alphabet.push_back(from_hex(parts.at(1)));
        } else if (tag == "bpe_merge") {
            merges.push_back({from_hex(parts.at(1)), from_hex(parts.at(2))});
        } else if (tag == "total") {
            vocab.total = std::stoll(parts.at(1));
        } else {
            throw IoError("unknown vocab line tag: " + tag);
        }
    }
    if (!hash_seen) throw IoError("vocab file missing content hash");
    for (auto& [k, bs] : buckets) {
        vocab.bucket_base[k] = bs.first;
        vocab.bucket_specs[k] = std::move(bs.second);
    }
    vocab.bpe = Bpe::from_parts(alphabet, merges);
    return vocab;
}

inline uint64_t vocab_hash(const Vocab& v) {
    Fnv1a64 h;
    for (const auto& [k, id] : v.key_table) {
        h.update(k);
        h.update(&id, sizeof(id));
    }
    for (const auto& [k, spec] : v.bucket_specs) {
        h.update(k);
        for (double b : spec.boundaries) h.update(&b, sizeof(b));
    }
    for (const auto& [val, id] : v.cat_table) {
        h.update(val);
        h.update(&id, sizeof(id));
    }
    for (const auto& m : v.bpe.merges()) {
        h.update(m.left);
        h.update(m.right);
    }
    uint64_t t = static_cast<uint64_t>(v.total);
    h.update(&t, sizeof(t));
    return h.digest();
}

} // namespace evseq
