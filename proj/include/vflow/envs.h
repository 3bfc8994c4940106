#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vflow/net.h"
#include "vflow/rng.h"

namespace vflow
{
    enum class NoiseMode
    {
        sign_flip,
        dropout,
        gaussian
    };

    NoiseMode parse_noise_mode(const std::string &name);
    std::string to_string(NoiseMode mode);

    /// Reward-channel corruption: with probability flip_rate the clean reward is negated, zeroed,
    /// or perturbed by N(0, sigma²) depending on mode.
    struct NoiseSpec
    {
        double flip_rate = 0.0;
        NoiseMode mode = NoiseMode::sign_flip;
        double sigma = 1.0;

        void validate() const;
        /// Returns the corrupted reward and whether corruption fired.
        double corrupt(double clean, Rng &rng, bool *fired = nullptr) const;
    };

    struct EnvState
    {
        Vec observation;
        int step_index = 0;
        bool done = false;
        bool terminal = false;  // ended by the dynamics rather than the step limit
    };

    /// Process-wide reward read counters; the training path must only read noisy rewards and the
    /// evaluation path only clean ones.
    struct RewardAccessCounters
    {
        static std::atomic<long long> clean_reads;
        static std::atomic<long long> noisy_reads;
        static void reset();
    };

    class StepResult
    {
    public:
        StepResult(EnvState state, double clean, double noisy, bool corrupted)
            : state(std::move(state)), corrupted(corrupted), clean_(clean), noisy_(noisy) {}

        double clean_reward() const
        {
            ++RewardAccessCounters::clean_reads;
            return clean_;
        }
        double noisy_reward() const
        {
            ++RewardAccessCounters::noisy_reads;
            return noisy_;
        }

        EnvState state;
        bool corrupted;

    private:
        double clean_;
        double noisy_;
    };

    struct EnvParams
    {
        int chain_length = 5;
        int max_steps = 0;  // 0 selects the environment default
        double goal_reward = 1.0;

        double bandit_low = -1.0;
        double bandit_high = 3.0;
        double bandit_high_prob0 = 0.5;
        double bandit_high_prob1 = 0.5;

        int grid_width = 5;
        int grid_height = 3;
        double cliff_prob = 0.05;
        double cliff_penalty = 5.0;

        NoiseSpec noise;
        std::uint64_t ood_seed = 1234;
    };

    class Env
    {
    public:
        virtual ~Env() = default;

        virtual std::string name() const = 0;
        virtual int obs_dim() const = 0;
        virtual int num_actions() const = 0;

        EnvState reset(Rng &rng);
        StepResult step(int action, Rng &rng);

        /// Number of distinct underlying states and the (untransformed) observation of one.
        virtual int num_states() const = 0;
        virtual Vec state_observation(int index) const = 0;

        bool done() const { return state_.done; }
        const EnvState &state() const { return state_; }

        /// When on, observations pass through a fixed random orthogonal transform.
        void set_ood(bool on) { ood_ = on; }
        bool ood() const { return ood_; }

        NoiseSpec noise;

    protected:
        Env(const EnvParams &params, int obs_dim);

        virtual void reset_impl(Rng &rng) = 0;
        /// Advances the internal state; returns (clean reward, terminal).
        virtual std::pair<double, bool> step_impl(int action, Rng &rng) = 0;
        virtual Vec raw_observation() const = 0;
        virtual int default_max_steps() const = 0;

        int max_steps_;

    private:
        Vec observe() const;

        EnvState state_;
        bool ood_ = false;
        Mat ood_transform_;
    };

    /// N positions, actions {0: left, 1: right}. Moving right from the last position pays
    /// goal_reward and ends the episode; left at position 0 stays put.
    class NoisyChain : public Env
    {
    public:
        explicit NoisyChain(const EnvParams &params);
        std::string name() const override { return "noisy-chain"; }
        int obs_dim() const override { return length_; }
        int num_actions() const override { return 2; }
        int position() const { return pos_; }
        int num_states() const override { return length_; }
        Vec state_observation(int index) const override;

    protected:
        void reset_impl(Rng &) override { pos_ = 0; }
        std::pair<double, bool> step_impl(int action, Rng &rng) override;
        Vec raw_observation() const override;
        int default_max_steps() const override { return 4 * length_; }

    private:
        int length_;
        double goal_reward_;
        int pos_ = 0;
    };

    /// One state, two actions; each pays `high` with its own probability, `low` otherwise.
    class BimodalBandit : public Env
    {
    public:
        explicit BimodalBandit(const EnvParams &params);
        std::string name() const override { return "bimodal-bandit"; }
        int obs_dim() const override { return 1; }
        int num_actions() const override { return 2; }

        /// Closed-form quantile of action `a`'s reward at level u.
        double reward_quantile(int action, double u) const;
        double reward_mean(int action) const;
        int num_states() const override { return 1; }
        Vec state_observation(int index) const override;

    protected:
        void reset_impl(Rng &) override {}
        std::pair<double, bool> step_impl(int action, Rng &rng) override;
        Vec raw_observation() const override { return Vec::Ones(1); }
        int default_max_steps() const override { return 1; }

    private:
        double low_, high_;
        double p_[2];
    };

    /// Width × height grid, start at (0,0), goal at (width-1,0). Entering an interior bottom-row
    /// cell risks a slip with probability cliff_prob: reward -cliff_penalty and the episode
    /// ends. Reaching the goal pays goal_reward. Actions: 0 up, 1 right, 2 down, 3 left.
    class CliffGrid : public Env
    {
    public:
        explicit CliffGrid(const EnvParams &params);
        std::string name() const override { return "cliff-grid"; }
        int obs_dim() const override { return width_ * height_; }
        int num_actions() const override { return 4; }

        int x() const { return x_; }
        int y() const { return y_; }
        /// Observation of the start cell, which borders the risky edge.
        Vec risky_observation() const;
        int num_states() const override { return width_ * height_; }
        Vec state_observation(int index) const override;

    protected:
        void reset_impl(Rng &) override { x_ = y_ = 0; }
        std::pair<double, bool> step_impl(int action, Rng &rng) override;
        Vec raw_observation() const override;
        int default_max_steps() const override { return 4 * (width_ + height_); }

    private:
        int width_, height_;
        double cliff_prob_, cliff_penalty_, goal_reward_;
        int x_ = 0, y_ = 0;
    };

    std::unique_ptr<Env> make_env(const std::string &name, const EnvParams &params);

    using ActionFn = std::function<int(const Vec &obs, Rng &rng)>;

    struct EvalStats
    {
        double mean_return = 0.0;
        double std_error = 0.0;
        std::vector<double> returns;  // sorted ascending
        double quantile(double u) const;
    };

    /// Discounted clean returns of `policy` over fresh episodes, seeded from `seed`.
    EvalStats evaluate(const ActionFn &policy, Env &env, int episodes, double gamma, std::uint64_t seed);
}
