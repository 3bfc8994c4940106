#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vflow/config.h"

namespace vflow
{
    /// Outcome of one property suite. `measured` is the worst observed statistic, compared
    /// against `threshold` in the direction the suite describes.
    struct SuiteResult
    {
        std::string name;
        bool pass = false;
        double measured = 0.0;
        double threshold = 0.0;
        int instances = 0;
        std::string detail;
    };

    struct VerifyOptions
    {
        std::uint64_t seed = 0;
        int instances = 100;
        int contraction_pairs = 200;
    };

    /// Relative error with a 1e-4 floor on the magnitude, so tiny gradients are compared absolutely.
    double gradient_rel_error(double analytic, double numeric);

    /// Max relative error between `analytic` and central differences of `f` around `x`.
    double finite_difference_check(const Vec &x, const Vec &analytic, const std::function<double(const Vec &)> &f,
                                   double step = 1e-5);

    SuiteResult suite_net_gradients(const VerifyOptions &opt);
    SuiteResult suite_flow_head_gradients(const VerifyOptions &opt);
    /// One suite per loss term plus the assembled critic objective (encoder included).
    std::vector<SuiteResult> suite_loss_gradients(const VerifyOptions &opt);
    std::vector<SuiteResult> suite_policy_gradients(const VerifyOptions &opt);
    SuiteResult suite_spectral_bound(const VerifyOptions &opt);
    SuiteResult suite_contraction(const VerifyOptions &opt, const GaeConfig &gae, int K);
    std::vector<SuiteResult> suite_jacobian(const VerifyOptions &opt);
    SuiteResult suite_one_step(const VerifyOptions &opt);
    SuiteResult suite_straightness(const VerifyOptions &opt);

    std::vector<SuiteResult> run_verify(const RunConfig &cfg, const VerifyOptions &opt);

    /// Fixed-width pass/fail table.
    std::string format_suite_table(const std::vector<SuiteResult> &results);
}
