#pragma once
// Shared plumbing: deterministic RNG, hashing, binary IO helpers, errors.
//
// Every stochastic component in the pipeline draws from Rng so that a run is
// a pure function of (config, seed) on any conforming platform. Distribution
// sampling is hand-rolled; std::* distributions are not bit-stable across
// standard libraries.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace evseq {

using real = double;

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 2.0 * kPi;

// ---------------------------------------------------------------------------
// Errors

struct EvseqError : std::runtime_error {
    explicit EvseqError(const std::string& what) : std::runtime_error(what) {}
};

struct InvariantError : EvseqError {
    using EvseqError::EvseqError;
};

struct IoError : EvseqError {
    using EvseqError::EvseqError;
};

struct ConfigError : EvseqError {
    using EvseqError::EvseqError;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) — content hashes for persisted artifacts.

struct Fnv1a64 {
    uint64_t state = 1469598103934665603ULL;

    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            state ^= p[i];
            state *= 1099511628211ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }

    uint64_t digest() const { return state; }

    std::string hex() const {
        char buf[17];
        snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state));
        return buf;
    }
};

inline uint64_t fnv1a64(std::string_view s) {
    Fnv1a64 h;
    h.update(s);
    return h.digest();
}

// ---------------------------------------------------------------------------
// RNG: splitmix64 streams. Cheap to fork per worker / per user id.

inline uint64_t splitmix64_next(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // burn-in decorrelates small seeds
        next_u64();
        next_u64();
    }

    // Derive an independent stream, e.g. per user id or per worker.
    Rng fork(uint64_t tag) const {
        uint64_t s = state_;
        uint64_t mixed = splitmix64_next(s) ^ (tag * 0x9e3779b97f4a7c15ULL + 0x853c49e6748fea9bULL);
        return Rng(mixed);
    }

    uint64_t next_u64() { return splitmix64_next(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    uint64_t uniform_u64(uint64_t n) {
        // modulo bias is < 2^-40 for all n used here
        return n == 0 ? 0 : next_u64() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller; one draw per call keeps the stream layout simple
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(kTwoPi * u2);
    }

    double lognormal(double mu, double sigma) { return std::exp(normal(mu, sigma)); }

    // index into an unnormalised nonnegative weight vector
    size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double x = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (x < acc) return i;
        }
        return weights.empty() ? 0 : weights.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_u64(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO. All on-disk binary formats go through these.

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) throw IoError("short read");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

inline void write_string(std::ostream& os, std::string_view s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    uint32_t n = read_pod<uint32_t>(is);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_pod<uint64_t>(os, v.size());
    if (!v.empty()) write_bytes(os, v.data(), v.size() * sizeof(T));
}

template <typename T>
std::vector<T> read_vec(std::istream& is) {
    uint64_t n = read_pod<uint64_t>(is);
    std::vector<T> v(n);
    if (n) read_bytes(is, v.data(), n * sizeof(T));
    return v;
}

} // namespace evseq
