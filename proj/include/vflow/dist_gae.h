#pragma once

#include <vector>

#include "vflow/trajectory.h"

namespace vflow
{
    struct GaeConfig
    {
        double gamma = 0.99;
        double lam = 0.95;

        void validate() const;
    };

    /// reward + γ·z_next[i] - z_curr[i]; the bootstrap term is dropped when `terminal`.
    DistAdvantage dist_td(double reward, const QuantileDistribution &z_next, const QuantileDistribution &z_curr,
                          double gamma, bool terminal);

    /// Reverse sweep A(s_t) = δ_t + γλ·A(s_{t+1}). Uses trajectory.predicted for Z(s_t) and
    /// trajectory.bootstrap for the state after a truncated (non-terminal) end.
    std::vector<DistAdvantage> dist_gae_backward(const Trajectory &trajectory, const GaeConfig &cfg);

    /// pred + adv, stably re-sorted.
    QuantileDistribution target_returns(const QuantileDistribution &pred, const DistAdvantage &adv);

    double scalarize(const DistAdvantage &adv);

    /// Mean absolute difference of paired sorted supports.
    double wasserstein1(const QuantileDistribution &a, const QuantileDistribution &b);

    /// Classical scalar GAE; `bootstrap` is ignored when `terminal`.
    std::vector<double> scalar_gae(const std::vector<double> &rewards, const std::vector<double> &values,
                                   double bootstrap, bool terminal, const GaeConfig &cfg);

    /// Small deterministic MDP under a fixed policy: state s moves to next[s] (-1 = episode end)
    /// collecting reward[s].
    struct QuantileMdp
    {
        std::vector<int> next;
        std::vector<double> reward;

        int size() const { return static_cast<int>(next.size()); }
    };

    /// Distributional λ-return operator Σ_k (1-λ)λ^(k-1) (T^π)^k Z on quantile supports,
    /// evaluated exactly through G = r + γ((1-λ)·P Z + λ·P G).
    std::vector<QuantileDistribution> gae_operator(const QuantileMdp &mdp, const std::vector<QuantileDistribution> &Z,
                                                   const GaeConfig &cfg);

    /// γ(1-λ) / (1-λγ).
    double contraction_modulus(const GaeConfig &cfg);

    /// sup over states of W1.
    double sup_wasserstein1(const std::vector<QuantileDistribution> &a, const std::vector<QuantileDistribution> &b);
}
