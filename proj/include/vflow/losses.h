#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "vflow/flow_head.h"

namespace vflow
{
    struct LossWeights
    {
        double reg = 0.1;
        double cons = 0.01;
        double risk = 0.5;
        double shape = 0.5;

        void validate() const;
    };

    /// Tail cutoffs for the risk and shape terms. Indices below are 0-based; the 1-based sets are
    /// left tail {1..k_alpha}, right tail {k_beta..K}, I_L = {1..k_alpha-2}, I_R = {k_beta..K-2}.
    struct TailSpec
    {
        double alpha = 0.1;
        double beta = 0.1;
        int K = 50;

        TailSpec() = default;
        TailSpec(double alpha, double beta, int K);

        int k_alpha() const;
        int k_beta() const;
        int left_shape_count() const { return std::max(0, k_alpha() - 2); }
        int right_shape_count() const { return std::max(0, K - 2 - k_beta() + 1); }
    };

    struct LossBreakdown
    {
        double udcfm = 0.0;
        double bcfm = 0.0;
        double cons = 0.0;
        double risk = 0.0;
        double shape = 0.0;
        double total = 0.0;
        LossWeights weights;
    };

    /// L_UDCFM + reg·L_BCFM + cons·L_cons + risk·L_Risk + shape·L_Shape.
    double total_loss(const LossBreakdown &components, const LossWeights &weights);

    struct PathPoint
    {
        double z;
        double u;
    };

    /// Straight interpolation z_t = t·x1 + (1-t)·x0 with velocity x1 - x0.
    PathPoint flow_path(double x0, double x1, double t);

    enum class Coupling
    {
        independent,
        sorted
    };

    /// Draws x1 from the sorted target supports. `independent` picks a uniform index; `sorted`
    /// picks the support whose rank matches Φ(x0) (monotone 1-D transport coupling).
    double draw_target(const QuantileDistribution &target, double x0, Coupling coupling, Rng &rng);

    /// Loss value and its gradient with respect to each queried velocity.
    struct VelocityLoss
    {
        double value = 0.0;
        Vec dv;
    };

    /// mean_i w_i (v_i - u_i)^2.
    VelocityLoss weighted_cfm(const Vec &v, const Vec &u, const Vec &w);

    struct PairLoss
    {
        double value = 0.0;
        Vec dv_a;
        Vec dv_b;
    };

    /// Terminal projections x̂ = z + (1 - t)·v at t (side a) and 1 - t (side b); mean squared gap.
    PairLoss consistency_core(const Vec &t, const Vec &z_a, const Vec &v_a, const Vec &z_b, const Vec &v_b);

    /// Loss plus gradient with respect to the sorted predicted supports.
    struct TailLoss
    {
        double value = 0.0;
        Vec grad;
    };

    TailLoss risk_loss(const QuantileDistribution &pred, const QuantileDistribution &tgt, const TailSpec &spec);
    TailLoss shape_loss(const QuantileDistribution &pred, const TailSpec &spec);

    /// Per-example inputs shared by the flow matching terms. `state` indexes a column of H.
    struct FlowSample
    {
        int state;
        double x0;
        double x1;
        double t;
    };

    /// Value with gradients for all model parameters and the state embeddings (same shape as H).
    struct LossGrad
    {
        double value = 0.0;
        FlowGrads grads;
        Mat dH;
    };

    /// Confidence-weighted flow matching toward x1 - x0. w_conf is per state and held constant.
    LossGrad udcfm_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch,
                        std::span<const double> w_conf);

    /// Flow matching toward the anchor path x0 -> anchor[state]. Anchors are plain values, so no
    /// gradient reaches whatever produced them. `x1` in the samples is ignored.
    LossGrad bcfm_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch,
                       std::span<const double> anchor, std::span<const double> w_conf);

    /// Symmetric-time consistency: both points sit on the x0 -> x1 line at t and 1 - t.
    LossGrad consistency_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch);

    /// Mean of the model's K-particle prediction per state, for use as a stop-gradient anchor.
    Vec anchor_targets(const std::vector<QuantileDistribution> &predictions);

    struct TailBatch
    {
        std::vector<int> states;
        Mat noise;                                  // K × S initial particles
        std::vector<QuantileDistribution> targets;  // sorted targets per state
    };

    struct TailLossGrad
    {
        double risk = 0.0;
        double shape = 0.0;
        FlowGrads grads;
        Mat dH;
        std::vector<QuantileDistribution> predictions;
    };

    /// Risk and shape terms on the model's projected quantiles (noise integrated with `steps`
    /// Euler steps, then sorted), averaged over states. Gradients are for
    /// risk_coef·L_Risk + shape_coef·L_Shape.
    TailLossGrad tail_losses(const FlowModel &model, const Mat &H, const TailBatch &batch, const TailSpec &spec,
                             int steps, double risk_coef, double shape_coef);
}
