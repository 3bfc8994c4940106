#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace vflow
{
    /// Seeded engine with the handful of draws the library needs. Each normal draw uses a fresh
    /// distribution object so the engine is the only state (checkpoints stay exact).
    class Rng
    {
    public:
        explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

        double normal() { return std::normal_distribution<double>{}(engine_); }
        double uniform() { return std::uniform_real_distribution<double>{}(engine_); }
        std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>{0, n - 1}(engine_); }
        bool bernoulli(double p) { return uniform() < p; }

        std::mt19937_64 &engine() { return engine_; }

        std::string state() const;
        void set_state(const std::string &text);

        /// Independent stream for a (seed, tag) pair, used for per-state and per-evaluation draws.
        static Rng derive(std::uint64_t seed, std::uint64_t tag);

    private:
        std::mt19937_64 engine_;
    };
}
