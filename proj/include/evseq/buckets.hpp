#pragma once
// Percentile bucketing for numerical values. Boundaries are the i/n quantiles
// (linear interpolation) of the nonzero training values; zero gets a dedicated
// token, matching the tokenisation scheme's extra zero bucket.

#include "evseq/common.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace evseq {

struct BucketSpec {
    std::string key_name;
    std::vector<double> boundaries;  // strictly increasing; size = n_buckets - 1
    bool degenerate = false;         // all training values equal -> single bucket

    int n_buckets() const { return static_cast<int>(boundaries.size()) + 1; }
};

// Type-7 (linear interpolation) quantile of a sorted vector.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw InvariantError("quantile of empty set");
    double pos = p * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline BucketSpec fit_buckets(const std::string& key, std::vector<double> values, int n_buckets) {
    BucketSpec spec;
    spec.key_name = key;
    std::vector<double> nonzero;
    nonzero.reserve(values.size());
    for (double v : values) {
        if (!std::isfinite(v)) throw InvariantError("fit_buckets: non-finite value");
        if (v != 0.0) nonzero.push_back(v);
    }
    if (nonzero.empty()) return spec;  // only the zero token will ever fire
    std::sort(nonzero.begin(), nonzero.end());
    size_t distinct = 1;
    for (size_t i = 1; i < nonzero.size(); ++i)
        if (nonzero[i] != nonzero[i - 1]) ++distinct;
    if (distinct == 1) {
        spec.degenerate = true;  // single bucket, caller may warn
        return spec;
    }
    for (int i = 1; i < n_buckets; ++i) {
        double b = quantile_sorted(nonzero, static_cast<double>(i) / n_buckets);
        if (spec.boundaries.empty() || b > spec.boundaries.back()) spec.boundaries.push_back(b);
    }
    return spec;
}

// Bucket index in [0, n_buckets); callers map zero separately via is_zero.
inline int bucketize(const BucketSpec& spec, double v) {
    if (!std::isfinite(v)) throw InvariantError("bucketize: non-finite value");
    if (v == 0.0) throw InvariantError("bucketize: zero handled by zero token");
    // half-open intervals: bucket i covers [b_{i-1}, b_i); clamped at the ends
    auto it = std::upper_bound(spec.boundaries.begin(), spec.boundaries.end(), v);
    return static_cast<int>(it - spec.boundaries.begin());
}

} // namespace evseq
