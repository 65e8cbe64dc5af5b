#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace procdiff {

enum class ErrorKind {
    Io,           // unreadable/unwritable paths, undecodable files
    Parse,        // malformed records
    Integrity,    // duplicate ids, broken invariants inside one file
    Referential,  // cross-references that do not resolve
    Validation,   // bad arguments / contract violations
    Coverage,     // scenario demands more images than the recipe has
    Config,       // incompatible configuration
    Numeric,      // non-finite values, degenerate inputs
    EmptyCorpus,  // nothing usable survived
    Incomplete,   // required companion data is missing
    Edit,         // a text edit did not apply
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

// Exit-code map used by the CLI (0 = ok).
inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::Parse:
        case ErrorKind::Integrity:
        case ErrorKind::Referential: return 1;
        case ErrorKind::EmptyCorpus: return 2;
        case ErrorKind::Numeric: return 3;
        case ErrorKind::Validation:
        case ErrorKind::Coverage:
        case ErrorKind::Config:
        case ErrorKind::Edit: return 4;
        case ErrorKind::Incomplete: return 5;
    }
    return 1;
}

// FNV-1a, used for token hashing, seed mixing and content audit hashes.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

// Deterministic RNG. Box-Muller on top of splitmix64 so draws do not depend
// on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ull)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace procdiff
