#pragma once
// Record -> token triples. Every position carries (key id, value id,
// within-field position); multi-valued fields replicate the key id across
// their value tokens. Times: life-long profile pairs carry soft-log seconds
// to the evaluation point (other profile pairs 0); each event carries
// soft-log seconds to the most recent event plus its calendar angles.

#include "evseq/corpus.hpp"
#include "evseq/timefeat.hpp"
#include "evseq/vocab.hpp"

#include <string>
#include <vector>

namespace evseq {

struct TokenTriple {
    int32_t key_id = 0;
    int32_t value_id = 0;
    int16_t pos = 0;  // within-field position; 0 for single-valued fields
};

struct TokenisedEvent {
    int64_t timestamp = 0;
    double log_dt = 0.0;  // soft-log seconds to the most recent event in history
    CalendarAngles cal{};
    std::vector<TokenTriple> triples;
};

struct TokenisedRecord {
    std::string record_id;
    std::vector<TokenTriple> profile;
    std::vector<double> profile_times;  // per profile triple; 0 unless life-long
    std::vector<TokenisedEvent> events;

    int64_t profile_token_count() const { return static_cast<int64_t>(profile.size()); }
    int64_t event_count() const { return static_cast<int64_t>(events.size()); }
    int64_t total_event_tokens() const {
        int64_t n = 0;
        for (const auto& e : events) n += static_cast<int64_t>(e.triples.size());
        return n;
    }
    // batching footprint: everything the model will embed for this record
    int64_t footprint() const { return profile_token_count() + total_event_tokens(); }
};

namespace tokenize_detail {

inline void append_field(const Vocab& vocab, const std::string& key, const std::string& value,
                         std::vector<TokenTriple>& out) {
    int32_t kid = static_cast<int32_t>(vocab.key_id(key));
    auto kind = vocab.kind_of(key);
    if (!kind) throw InvariantError("unknown key (schema drift): " + key);
    switch (*kind) {
        case FittedKind::numerical: {
            double d;
            int64_t vid = Vocab::kUnk;
            if (vocab_detail::parse_double(value, d)) vid = vocab.bucket_token(key, d);
            out.push_back({kid, static_cast<int32_t>(vid), 0});
            break;
        }
        case FittedKind::categorical: {
            out.push_back({kid, static_cast<int32_t>(vocab.cat_token(value)), 0});
            break;
        }
        case FittedKind::textual: {
            auto toks = vocab.text_tokens(value);
            int16_t pos = 0;
            for (int64_t t : toks) out.push_back({kid, static_cast<int32_t>(t), pos++});
            break;
        }
    }
}

} // namespace tokenize_detail

inline TokenisedRecord tokenize_record(const UserRecord& rec, const Vocab& vocab) {
    TokenisedRecord out;
    out.record_id = rec.record_id;

    // profile state: plain pairs at time 0, life-long pairs at soft-log distance
    for (const auto& [k, v] : rec.profile_state) {
        size_t before = out.profile.size();
        tokenize_detail::append_field(vocab, k, v, out.profile);
        for (size_t i = before; i < out.profile.size(); ++i) out.profile_times.push_back(0.0);
    }
    for (const auto& [k, v, ts] : rec.lifelong_events) {
        size_t before = out.profile.size();
        tokenize_detail::append_field(vocab, k, v, out.profile);
        double dt = soft_log_time(static_cast<double>(std::max<int64_t>(0, rec.evaluation_point - ts)));
        for (size_t i = before; i < out.profile.size(); ++i) out.profile_times.push_back(dt);
    }

    int64_t most_recent = rec.events.empty() ? rec.evaluation_point : rec.events.back().timestamp;
    out.events.reserve(rec.events.size());
    for (const auto& e : rec.events) {
        TokenisedEvent te;
        te.timestamp = e.timestamp;
        te.log_dt = soft_log_time(static_cast<double>(most_recent - e.timestamp));
        te.cal = calendar_features(e.timestamp);
        for (const auto& [k, v] : e.fields) tokenize_detail::append_field(vocab, k, v, te.triples);
        out.events.push_back(std::move(te));
    }
    return out;
}

} // namespace evseq
