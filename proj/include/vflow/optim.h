#pragma once

#include "vflow/net.h"

namespace vflow
{
    struct AdamConfig
    {
        double step_size = 3e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    /// Adaptive moment estimation over a flat parameter vector.
    class Adam
    {
    public:
        Adam() = default;
        Adam(std::size_t n, AdamConfig cfg) : cfg(cfg), m(Vec::Zero(static_cast<Eigen::Index>(n))), v(m) {}

        void step(Vec &params, const Vec &grad);

        AdamConfig cfg;
        Vec m;
        Vec v;
        long long steps = 0;
    };
}
