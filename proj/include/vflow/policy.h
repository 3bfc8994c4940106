#pragma once

#include <cstdint>
#include <vector>

#include "vflow/net.h"
#include "vflow/optim.h"
#include "vflow/rng.h"

namespace vflow
{
    struct ClipConfig
    {
        double epsilon = 0.2;
        void validate() const;
    };

    struct PolicyOutput
    {
        Vec logits;
        Vec probs;
        double entropy = 0.0;

        double log_prob(int action) const;
    };

    /// Numerically stable softmax with entropy.
    PolicyOutput policy_output(const Vec &logits);

    /// Categorical policy over a small MLP (obs -> logits).
    class Policy
    {
    public:
        Policy() = default;
        Policy(int obs_dim, int actions, int hidden, std::uint64_t seed);

        int num_actions() const { return net.out_dim(); }
        PolicyOutput output(const Vec &obs) const;
        /// Samples an action; writes its log-probability when `log_prob` is set.
        int act(const Vec &obs, Rng &rng, double *log_prob = nullptr) const;
        int greedy(const Vec &obs) const;

        Mlp net;
    };

    /// min(ratio·adv, clip(ratio, 1-eps, 1+eps)·adv).
    double ppo_surrogate(double ratio, double adv, double eps);

    /// In-place shift to mean 0 and, when std ≥ 1e-8, scale to std 1.
    void normalize_advantages(std::vector<double> &adv);

    struct PolicyBatch
    {
        Mat observations;  // obs_dim × N
        std::vector<int> actions;
        std::vector<double> old_log_probs;
        std::vector<double> advantages;
    };

    struct PolicyUpdateConfig
    {
        ClipConfig clip;
        double entropy_coef = 0.01;
        bool normalize = true;
    };

    /// Objective -(mean surrogate + entropy_coef·mean entropy) and its flat parameter gradient.
    struct PolicyObjective
    {
        double surrogate = 0.0;
        double entropy = 0.0;
        double loss = 0.0;
        double clip_fraction = 0.0;
        Vec grad;
    };

    /// Advantages are used as given (normalize beforehand if wanted).
    PolicyObjective policy_objective(const Policy &policy, const PolicyBatch &batch, const PolicyUpdateConfig &cfg);

    /// One Adam step on the clipped surrogate. Throws NumericalError carrying `batch_id` if the
    /// gradient is non-finite; parameters are left untouched in that case.
    PolicyObjective policy_update(Policy &policy, Adam &optimizer, PolicyBatch batch, const PolicyUpdateConfig &cfg,
                                  long long batch_id);

    /// Plain scalar value head for the reference PPO mode.
    class ScalarCritic
    {
    public:
        ScalarCritic() = default;
        ScalarCritic(int obs_dim, int hidden, std::uint64_t seed);

        Vec values(const Mat &observations) const;
        double value(const Vec &obs) const;

        /// Mean squared error to `targets` and its flat gradient.
        double loss(const Mat &observations, const Vec &targets, Vec *grad) const;

        Mlp net;
    };

    /// TD(λ) return targets: scalar GAE plus the current values.
    std::vector<double> scalar_critic_targets(const std::vector<double> &rewards, const std::vector<double> &values,
                                              double bootstrap, bool terminal, double gamma, double lam);
}
