#include "vflow/envs.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/QR>

namespace vflow
{
    std::atomic<long long> RewardAccessCounters::clean_reads{0};
    std::atomic<long long> RewardAccessCounters::noisy_reads{0};

    void RewardAccessCounters::reset()
    {
        clean_reads = 0;
        noisy_reads = 0;
    }

    NoiseMode parse_noise_mode(const std::string &name)
    {
        if (name == "sign-flip") return NoiseMode::sign_flip;
        if (name == "dropout") return NoiseMode::dropout;
        if (name == "gaussian") return NoiseMode::gaussian;
        throw std::invalid_argument("unknown noise mode '" + name + "'");
    }

    std::string to_string(NoiseMode mode)
    {
        switch (mode) {
            case NoiseMode::sign_flip: return "sign-flip";
            case NoiseMode::dropout: return "dropout";
            case NoiseMode::gaussian: return "gaussian";
        }
        return "?";
    }

    void NoiseSpec::validate() const
    {
        if (!(flip_rate >= 0.0 && flip_rate <= 1.0)) throw std::invalid_argument("flip_rate must lie in [0, 1]");
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("noise sigma must be >= 0");
    }

    double NoiseSpec::corrupt(double clean, Rng &rng, bool *fired) const
    {
        // Always consume the draw so trajectories do not depend on the noise rate's branch.
        const bool hit = rng.uniform() < flip_rate;
        const double g = mode == NoiseMode::gaussian ? rng.normal() : 0.0;
        if (fired) *fired = hit;
        if (!hit) return clean;
        switch (mode) {
            case NoiseMode::sign_flip: return -clean;
            case NoiseMode::dropout: return 0.0;
            case NoiseMode::gaussian: return clean + sigma * g;
        }
        return clean;
    }

    Env::Env(const EnvParams &params, int obs_dim) : noise(params.noise), max_steps_(params.max_steps)
    {
        noise.validate();
        Rng rng(params.ood_seed);
        Mat g(obs_dim, obs_dim);
        for (Eigen::Index j = 0; j < g.cols(); ++j)
            for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = rng.normal();
        ood_transform_ = Eigen::HouseholderQR<Mat>(g).householderQ() * Mat::Identity(obs_dim, obs_dim);
    }

    Vec Env::observe() const
    {
        Vec o = raw_observation();
        if (ood_) return ood_transform_ * o;
        return o;
    }

    EnvState Env::reset(Rng &rng)
    {
        if (max_steps_ <= 0) max_steps_ = default_max_steps();
        reset_impl(rng);
        state_.step_index = 0;
        state_.done = false;
        state_.terminal = false;
        state_.observation = observe();
        return state_;
    }

    StepResult Env::step(int action, Rng &rng)
    {
        if (state_.done) throw std::logic_error(name() + ": step called on a finished episode");
        if (action < 0 || action >= num_actions()) throw std::invalid_argument(name() + ": action out of range");
        const auto [clean, terminal] = step_impl(action, rng);
        bool fired = false;
        const double noisy = noise.corrupt(clean, rng, &fired);
        ++state_.step_index;
        state_.terminal = terminal;
        state_.done = terminal || state_.step_index >= max_steps_;
        state_.observation = observe();
        return StepResult(state_, clean, noisy, fired);
    }

    NoisyChain::NoisyChain(const EnvParams &params)
        : Env(params, params.chain_length), length_(params.chain_length), goal_reward_(params.goal_reward)
    {
        if (length_ < 2) throw std::invalid_argument("noisy-chain: chain_length must be >= 2");
    }

    std::pair<double, bool> NoisyChain::step_impl(int action, Rng &)
    {
        if (action == 1) {
            if (pos_ == length_ - 1) return {goal_reward_, true};
            ++pos_;
        } else if (pos_ > 0) {
            --pos_;
        }
        return {0.0, false};
    }

    Vec NoisyChain::raw_observation() const { return Vec::Unit(length_, pos_); }

    Vec NoisyChain::state_observation(int index) const
    {
        if (index < 0 || index >= length_) throw std::out_of_range("noisy-chain: state index out of range");
        return Vec::Unit(length_, index);
    }

    BimodalBandit::BimodalBandit(const EnvParams &params)
        : Env(params, 1), low_(params.bandit_low), high_(params.bandit_high),
          p_{params.bandit_high_prob0, params.bandit_high_prob1}
    {
        if (!(low_ <= high_)) throw std::invalid_argument("bimodal-bandit: bandit_low must be <= bandit_high");
        for (double p : p_)
            if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bimodal-bandit: mode probability outside [0, 1]");
    }

    std::pair<double, bool> BimodalBandit::step_impl(int action, Rng &rng)
    {
        return {rng.bernoulli(p_[action]) ? high_ : low_, true};
    }

    double BimodalBandit::reward_quantile(int action, double u) const { return u < 1.0 - p_[action] ? low_ : high_; }

    Vec BimodalBandit::state_observation(int index) const
    {
        if (index != 0) throw std::out_of_range("bimodal-bandit: state index out of range");
        return Vec::Ones(1);
    }

    double BimodalBandit::reward_mean(int action) const { return p_[action] * high_ + (1.0 - p_[action]) * low_; }

    CliffGrid::CliffGrid(const EnvParams &params)
        : Env(params, params.grid_width * params.grid_height), width_(params.grid_width), height_(params.grid_height),
          cliff_prob_(params.cliff_prob), cliff_penalty_(params.cliff_penalty), goal_reward_(params.goal_reward)
    {
        if (width_ < 3 || height_ < 2) throw std::invalid_argument("cliff-grid: needs width >= 3 and height >= 2");
        if (!(cliff_prob_ >= 0.0 && cliff_prob_ <= 1.0)) throw std::invalid_argument("cliff-grid: cliff_prob outside [0, 1]");
    }

    std::pair<double, bool> CliffGrid::step_impl(int action, Rng &rng)
    {
        static constexpr int dx[] = {0, 1, 0, -1};
        static constexpr int dy[] = {1, 0, -1, 0};
        x_ = std::clamp(x_ + dx[action], 0, width_ - 1);
        y_ = std::clamp(y_ + dy[action], 0, height_ - 1);
        const bool slip = rng.uniform() < cliff_prob_;
        if (x_ == width_ - 1 && y_ == 0) return {goal_reward_, true};
        if (y_ == 0 && x_ > 0 && slip) return {-cliff_penalty_, true};
        return {0.0, false};
    }

    Vec CliffGrid::raw_observation() const { return Vec::Unit(width_ * height_, y_ * width_ + x_); }

    Vec CliffGrid::risky_observation() const { return Vec::Unit(width_ * height_, 0); }

    Vec CliffGrid::state_observation(int index) const
    {
        if (index < 0 || index >= width_ * height_) throw std::out_of_range("cliff-grid: state index out of range");
        return Vec::Unit(width_ * height_, index);
    }

    std::unique_ptr<Env> make_env(const std::string &name, const EnvParams &params)
    {
        if (name == "noisy-chain") return std::make_unique<NoisyChain>(params);
        if (name == "bimodal-bandit") return std::make_unique<BimodalBandit>(params);
        if (name == "cliff-grid") return std::make_unique<CliffGrid>(params);
        throw std::invalid_argument("unknown environment '" + name + "'");
    }

    double EvalStats::quantile(double u) const
    {
        if (returns.empty()) return 0.0;
        const auto n = static_cast<double>(returns.size());
        const auto i = static_cast<std::size_t>(std::clamp(std::floor(u * n), 0.0, n - 1));
        return returns[i];
    }

    EvalStats evaluate(const ActionFn &policy, Env &env, int episodes, double gamma, std::uint64_t seed)
    {
        if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
        EvalStats out;
        for (int ep = 0; ep < episodes; ++ep) {
            Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(ep));
            EnvState s = env.reset(rng);
            double ret = 0.0, discount = 1.0;
            while (!s.done) {
                const StepResult r = env.step(policy(s.observation, rng), rng);
                ret += discount * r.clean_reward();
                discount *= gamma;
                s = r.state;
            }
            out.returns.push_back(ret);
        }
        std::sort(out.returns.begin(), out.returns.end());
        double sum = 0.0, sq = 0.0;
        for (double r : out.returns) sum += r;
        out.mean_return = sum / episodes;
        for (double r : out.returns) sq += (r - out.mean_return) * (r - out.mean_return);
        out.std_error = episodes > 1 ? std::sqrt(sq / (episodes - 1) / episodes) : 0.0;
        return out;
    }
}
