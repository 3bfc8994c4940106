#include <doctest.h>

#include <cmath>

#include "vflow/envs.h"

using namespace vflow;

namespace
{
    EnvParams quiet()
    {
        EnvParams p;
        p.noise.flip_rate = 0.0;
        return p;
    }

    int always(int a, const Vec &, Rng &) { return a; }
}

TEST_SUITE("envs")
{
    TEST_CASE("reward corruption rates")
    {
        Rng rng(1);
        NoiseSpec none{0.0, NoiseMode::sign_flip, 1.0};
        NoiseSpec all{1.0, NoiseMode::sign_flip, 1.0};
        for (int i = 0; i < 1000; ++i) {
            const double r = rng.normal();
            CHECK(none.corrupt(r, rng) == r);
            CHECK(all.corrupt(r, rng) == -r);
        }
        NoiseSpec drop{1.0, NoiseMode::dropout, 1.0};
        CHECK(drop.corrupt(2.5, rng) == 0.0);

        NoiseSpec some{0.3, NoiseMode::sign_flip, 1.0};
        const int n = 100000;
        int flips = 0;
        for (int i = 0; i < n; ++i) flips += some.corrupt(1.0, rng) == -1.0;
        CHECK(std::abs(static_cast<double>(flips) / n - 0.3) < 0.01);

        NoiseSpec gauss{1.0, NoiseMode::gaussian, 0.5};
        double sum = 0, sq = 0;
        for (int i = 0; i < n; ++i) {
            const double e = gauss.corrupt(1.0, rng) - 1.0;
            sum += e;
            sq += e * e;
        }
        CHECK(std::abs(sum / n) < 0.01);
        CHECK(std::sqrt(sq / n) == doctest::Approx(0.5).epsilon(0.02));

        CHECK_THROWS_AS((NoiseSpec{1.5, NoiseMode::sign_flip, 1.0}.validate()), std::invalid_argument);
        CHECK(parse_noise_mode("sign-flip") == NoiseMode::sign_flip);
        CHECK(to_string(NoiseMode::gaussian) == "gaussian");
        CHECK_THROWS_AS(parse_noise_mode("flip"), std::invalid_argument);
    }

    TEST_CASE("noisy env steps report both channels")
    {
        EnvParams p;
        p.noise.flip_rate = 1.0;
        NoisyChain env(p);
        Rng rng(2);
        env.reset(rng);
        for (int i = 0; i < 4; ++i) env.step(1, rng);
        const StepResult r = env.step(1, rng);
        CHECK(r.clean_reward() == 1.0);
        CHECK(r.noisy_reward() == -1.0);
        CHECK(r.corrupted);
        CHECK(r.state.done);
        CHECK(r.state.terminal);
        CHECK_THROWS_AS(env.step(1, rng), std::logic_error);
    }

    TEST_CASE("chain value and optimal return")
    {
        NoisyChain env(quiet());
        const double gamma = 0.99;
        CHECK(std::pow(gamma, 4) == doctest::Approx(0.9606).epsilon(1e-4));
        const EvalStats s = evaluate([](const Vec &o, Rng &r) { return always(1, o, r); }, env, 10, gamma, 3);
        for (double r : s.returns) CHECK(r == std::pow(gamma, 4));
        CHECK(s.std_error == 0.0);

        Rng rng(0);
        const EnvState st = env.reset(rng);
        CHECK(st.observation == Vec::Unit(5, 0));
        CHECK_THROWS_AS(env.step(2, rng), std::invalid_argument);
        CHECK(env.num_states() == 5);
        CHECK(env.state_observation(3) == Vec::Unit(5, 3));

        // A policy that never reaches the goal is cut off at the step limit.
        const EvalStats stuck = evaluate([](const Vec &o, Rng &r) { return always(0, o, r); }, env, 2, gamma, 3);
        CHECK(stuck.mean_return == 0.0);
    }

    TEST_CASE("bimodal bandit closed form")
    {
        BimodalBandit env(quiet());
        CHECK(env.reward_mean(0) == 1.0);
        CHECK(env.reward_mean(1) == 1.0);
        CHECK(env.reward_quantile(0, 0.1) == -1.0);
        CHECK(env.reward_quantile(0, 0.9) == 3.0);

        const int episodes = 4000;
        const EvalStats s = evaluate([](const Vec &, Rng &r) { return static_cast<int>(r.index(2)); }, env, episodes, 0.99, 5);
        CHECK(std::abs(s.mean_return - 1.0) < 3 * s.std_error);
        CHECK(s.std_error > 0.0);
        CHECK(s.quantile(0.1) == -1.0);
        CHECK(s.quantile(0.9) == 3.0);
    }

    TEST_CASE("cliff grid without slips is a shortest-path grid")
    {
        EnvParams p = quiet();
        p.cliff_prob = 0.0;
        CliffGrid env(p);
        const double gamma = 0.9;
        const EvalStats s = evaluate([](const Vec &o, Rng &r) { return always(1, o, r); }, env, 50, gamma, 1);
        for (double r : s.returns) CHECK(r == doctest::Approx(std::pow(gamma, 3)).epsilon(1e-15));

        // Detour over the top row: up, right ×4, down is 6 steps.
        Rng rng(0);
        env.reset(rng);
        double ret = 0, disc = 1;
        for (int a : {0, 1, 1, 1, 1, 2}) {
            const StepResult r = env.step(a, rng);
            ret += disc * r.clean_reward();
            disc *= gamma;
        }
        CHECK(env.done());
        CHECK(ret == doctest::Approx(std::pow(gamma, 5)));
    }

    TEST_CASE("cliff grid slips on the bottom row")
    {
        EnvParams p = quiet();
        p.cliff_prob = 1.0;
        CliffGrid env(p);
        Rng rng(0);
        env.reset(rng);
        const StepResult r = env.step(1, rng);
        CHECK(r.clean_reward() == -p.cliff_penalty);
        CHECK(r.state.terminal);
        CHECK(env.risky_observation() == env.state_observation(0));
    }

    TEST_CASE("evaluation is seeded")
    {
        EnvParams p = quiet();
        p.cliff_prob = 0.3;
        CliffGrid a(p), b(p);
        auto pol = [](const Vec &, Rng &r) { return static_cast<int>(r.index(4)); };
        const EvalStats x = evaluate(pol, a, 1, 0.95, 77), y = evaluate(pol, b, 1, 0.95, 77);
        CHECK(x.returns == y.returns);
        CHECK(evaluate(pol, a, 40, 0.95, 77).returns == evaluate(pol, b, 40, 0.95, 77).returns);
    }

    TEST_CASE("out-of-distribution observations are an orthogonal transform")
    {
        NoisyChain env(quiet());
        Rng rng(0);
        const Vec plain = env.reset(rng).observation;
        env.set_ood(true);
        const Vec shifted = env.reset(rng).observation;
        CHECK(shifted.norm() == doctest::Approx(plain.norm()).epsilon(1e-12));
        CHECK((shifted - plain).norm() > 1e-3);
    }

    TEST_CASE("evaluation reads only clean rewards")
    {
        BimodalBandit env(quiet());
        RewardAccessCounters::reset();
        evaluate([](const Vec &, Rng &) { return 0; }, env, 25, 0.99, 1);
        CHECK(RewardAccessCounters::clean_reads == 25);
        CHECK(RewardAccessCounters::noisy_reads == 0);
    }

    TEST_CASE("make_env")
    {
        CHECK(make_env("noisy-chain", quiet())->name() == "noisy-chain");
        CHECK(make_env("bimodal-bandit", quiet())->num_actions() == 2);
        CHECK(make_env("cliff-grid", quiet())->obs_dim() == 15);
        CHECK_THROWS_AS(make_env("maze", quiet()), std::invalid_argument);
    }
}
