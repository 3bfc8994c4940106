#pragma once

#include <vector>

#include "vflow/flow_head.h"

namespace vflow
{
    /// Advantage distribution on quantile supports; elementwise, not re-sorted.
    struct DistAdvantage
    {
        Vec values;
    };

    /// One rollout in time order. Rewards are the corrupted training channel only.
    struct Trajectory
    {
        std::vector<Vec> observations;
        std::vector<int> actions;
        std::vector<double> log_probs;
        std::vector<double> rewards;
        bool terminal = false;
        Vec final_observation;

        std::vector<QuantileDistribution> predicted;
        QuantileDistribution bootstrap;
        std::vector<DistAdvantage> advantages;
        std::vector<QuantileDistribution> targets;

        std::size_t size() const { return rewards.size(); }
    };

    using TrajectoryBatch = std::vector<Trajectory>;
}
