#pragma once
// Seedable, splittable, counter-based random streams.
//
// Each Rng is a (key, counter) pair; the n-th output is a pure function of
// (key, n) via the splitmix64 finalizer, so streams can be split by name or
// index and evaluated in any order by any number of workers while staying
// bit-reproducible. Scenario k always draws from split(seed, "...", k)
// regardless of which worker handles it.

#include <cstdint>
#include <string_view>

#include "opfs/common.hpp"

namespace opfs {

namespace detail {
inline std::uint64_t sm64_mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
} // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(detail::sm64_mix(seed ^ 0x6a09e667f3bcc909ull)) {}

    // Child stream addressed by integer label; independent of parent draws.
    Rng split(std::uint64_t label) const {
        return Rng(detail::sm64_mix(key_ ^ detail::sm64_mix(label ^ 0xbb67ae8584caa73bull)), 0);
    }
    // Child stream addressed by name (e.g. "dataset1", "init", "shuffle").
    Rng split(std::string_view name) const { return split(fnv1a(name)); }

    std::uint64_t next_u64() { return detail::sm64_mix(key_ + (++ctr_) * 0x9e3779b97f4a7c15ull); }

    // Uniform double in [0, 1): top 53 bits of the counter output.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double next_double(double lo, double hi) { return lo + next_double() * (hi - lo); }

    // Uniform integer in [0, n); n > 0. Rejection-free modulo is fine here:
    // n is tiny (shuffle indices) relative to 2^64, bias < 2^-50.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

private:
    Rng(std::uint64_t key, std::uint64_t ctr) : key_(key), ctr_(ctr) {}
    std::uint64_t key_;
    std::uint64_t ctr_ = 0;
};

} // namespace opfs
