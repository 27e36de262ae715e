#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sumnet/tensor.hpp"

namespace sumnet {

// Derives an independent stream seed. splitmix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic random source. Distributions are generated by hand (not via
// <random> distribution objects, whose output is implementation-defined) so
// a seed produces identical streams on every standard library.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    double uniform01() { return (gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    // Rayleigh with unit mean: sigma = sqrt(2/pi), E[X] = sigma*sqrt(pi/2) = 1.
    double rayleigh_mean1() {
        double u = uniform01();
        while (u >= 1.0) u = uniform01();
        const double sigma = std::sqrt(2.0 / M_PI);
        return sigma * std::sqrt(-2.0 * std::log1p(-u));
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i)
            std::swap(items[i - 1], items[uniform_int(0, static_cast<int>(i - 1))]);
    }

    Tensor uniform_tensor(TensorShape s, double lo, double hi) {
        Tensor t = Tensor::zeros(s);
        for (double& v : t.mutable_data()) v = uniform(lo, hi);
        return t;
    }

    Tensor normal_tensor(TensorShape s, double stddev = 1.0) {
        Tensor t = Tensor::zeros(s);
        for (double& v : t.mutable_data()) v = stddev * normal();
        return t;
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace sumnet
