#include "vflow/optim.h"

#include <cmath>
#include <stdexcept>

namespace vflow
{
    void Adam::step(Vec &params, const Vec &grad)
    {
        if (params.size() != m.size() || grad.size() != m.size())
            throw std::invalid_argument("Adam::step: size mismatch");
        ++steps;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps));
        params.array() -= cfg.step_size * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
    }
}
