#pragma once

#include <cstdint>
#include <filesystem>

#include "vflow/flow_head.h"

namespace vflow
{
    struct FlowExport
    {
        std::size_t records = 0;
        QuantileDistribution quantiles;
    };

    /// Integrates `particles` standard-normal draws for one state with recording on and writes
    ///   flow_dump.jsonl      one {"state","particle","t","z","v"} object per line, particle-major
    ///   quantiles.csv        k,level,value of the sorted terminal particles
    ///   velocity_grid.csv    t,z,v over a regular grid covering the particle range
    FlowExport export_flow(const FlowModel &model, const Vec &observation, int state_index, int particles, int steps,
                           std::uint64_t seed, const std::filesystem::path &out_dir);
}
