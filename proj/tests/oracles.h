#pragma once

// Independent reference computations shared by the unit tests. Nothing here calls into the
// library's own checking helpers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Core>

namespace oracle
{
    inline long double sigmoid(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

    inline long double mish(long double x) { return x * std::tanh(std::log1p(std::exp(x))); }

    /// Central differences of f at x, one coordinate at a time.
    inline Eigen::VectorXd central_diff(const std::function<double(const Eigen::VectorXd &)> &f, Eigen::VectorXd x,
                                        double h = 1e-5)
    {
        Eigen::VectorXd g(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double xi = x[i];
            x[i] = xi + h;
            const double up = f(x);
            x[i] = xi - h;
            const double dn = f(x);
            x[i] = xi;
            g[i] = (up - dn) / (2 * h);
        }
        return g;
    }

    /// Max over entries of |a - n| / max(|a|, |n|, floor).
    inline double max_rel_error(const Eigen::VectorXd &a, const Eigen::VectorXd &n, double floor = 1e-4)
    {
        double worst = 0.0;
        for (Eigen::Index i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor}));
        return worst;
    }

    /// Scalar GAE written directly from the recursion.
    inline std::vector<double> gae(const std::vector<double> &r, const std::vector<double> &v, double next_value,
                                   double gamma, double lam)
    {
        std::vector<double> adv(r.size());
        double running = 0.0;
        for (std::size_t i = r.size(); i-- > 0;) {
            const double nv = i + 1 < r.size() ? v[i + 1] : next_value;
            running = r[i] + gamma * nv - v[i] + gamma * lam * running;
            adv[i] = running;
        }
        return adv;
    }
}
