#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvd {

// Exit-code contract: 0 ok, 2 config error, 3 data error, 4 numerical
// failure, 5 checkpoint format/version mismatch.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitDataError = 3;
inline constexpr int kExitNumericalError = 4;
inline constexpr int kExitCheckpointError = 5;

inline constexpr const char* kCodeVersion = "mvdiff-0.1.0";

// Deterministic RNG. All randomness in the project flows through this so
// that (seed, config) reproduces every byte regardless of platform stdlib.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        // splitmix64 expansion of the seed into xoshiro256++ state
        std::uint64_t x = seed;
        for (int i = 0; i < 4; ++i) {
            x += 0x9e3779b97f4a7c15ull;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s_[i] = z ^ (z >> 31);
        }
        has_gauss_ = false;
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // multiply-shift; bias is negligible for n << 2^64
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Box-Muller, cached pair
    double normal() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        gauss_ = r * std::sin(a);
        has_gauss_ = true;
        return r * std::cos(a);
    }

    // child generator with decorrelated stream, for per-item seeding
    Rng fork(std::uint64_t stream) const {
        Rng child;
        child.reseed(s_[0] ^ (0x632be59bd9b4e019ull * (stream + 1)));
        return child;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t s_[4] = {1, 2, 3, 4};
    bool has_gauss_ = false;
    double gauss_ = 0.0;
};

// FNV-1a, used for config hashing and derived seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

void parallel_for(std::int64_t begin, std::int64_t end, int threads,
                  const std::function<void(std::int64_t)>& body);

// Process-wide degree of parallelism (CLI --threads). 1 guarantees
// bit-deterministic results.
void set_thread_count(int n);
int thread_count();

}  // namespace mvd
