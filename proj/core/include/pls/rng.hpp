#pragma once

#include <cmath>
#include <cstdint>

#include "pls/tensor.hpp"

namespace pls {

// Counter-based generator: every draw is a pure function of
// (seed, stream, draw index), so sampled values do not depend on generation
// order or thread schedule.  The mixing function is the splitmix64 finalizer
// applied to a keyed counter.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream), key_(make_key(seed, stream)) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() { return u64_at(counter_++); }

    // Uniform in [0, 1).
    double next_uniform() { return uniform_at(counter_++); }

    // Standard normal via Box-Muller on consecutive counter pairs.  Values
    // are computed in double and narrowed by the caller if needed.
    double next_normal() { return normal_at(counter_++); }

    // Independent generator addressed by id; used for per-sample and
    // per-probe streams.
    SeededRng substream(std::uint64_t id) const {
        return SeededRng(seed_, mix(stream_ ^ mix(id + 0x9e3779b97f4a7c15ull)));
    }

    std::uint64_t u64_at(std::uint64_t idx) const { return mix(key_ + idx * 0x9e3779b97f4a7c15ull); }

    double uniform_at(std::uint64_t idx) const {
        return static_cast<double>(u64_at(idx) >> 11) * 0x1.0p-53;
    }

    double normal_at(std::uint64_t idx) const {
        const std::uint64_t pair = idx >> 1;
        // u1 in (0, 1] so the log is finite.
        const double u1 = static_cast<double>((u64_at(2 * pair) >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform_at(2 * pair + 1);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        return (idx & 1) == 0 ? r * std::cos(a) : r * std::sin(a);
    }

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

private:
    static std::uint64_t make_key(std::uint64_t seed, std::uint64_t stream) {
        return mix(mix(seed + 0x9e3779b97f4a7c15ull) ^ mix(stream + 0x6a09e667f3bcc909ull));
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

template <typename T>
Tensor<T> gaussian(SeededRng& rng, std::vector<std::size_t> dims, double stddev = 1.0, double mean = 0.0) {
    Tensor<T> t(std::move(dims));
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = static_cast<T>(mean + stddev * rng.next_normal());
    return t;
}

}  // namespace pls
