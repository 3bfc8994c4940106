#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vflow/checkpoint.h"
#include "vflow/config.h"

namespace vflow
{
    /// One metrics line. Evaluation rows carry no loss values and update = -1.
    struct MetricsRow
    {
        long long iteration = 0;
        long long update = -1;
        LossBreakdown loss;
        double mean_w_conf = 0.0;
        double mean_adv = 0.0;
        std::optional<double> clean_eval_return;
        double noisy_train_return = 0.0;
        double wall_time = 0.0;
        bool eval = false;
    };

    std::string metrics_header();
    std::string format_metrics_row(const MetricsRow &row);

    /// Φ⁻¹((k + 0.5)/K) for k = 0..K-1: a deterministic, evenly spread noise batch.
    Vec stratified_normal(int K);

    /// Per-column distribution predictions and confidence weights. Identical observation columns
    /// share one K-particle sample and one sensitivity trace.
    struct StatePredictions
    {
        std::vector<QuantileDistribution> dists;
        Vec w_conf;
    };

    StatePredictions predict_states(const FlowModel &model, const Mat &observations, int K, int steps,
                                    int jacobian_steps, double tau_temp, Rng &rng);

    /// Frozen critic inputs for one iteration; one column / entry per transition.
    struct CriticData
    {
        Mat observations;
        std::vector<QuantileDistribution> targets;
        Vec w_conf;
        Vec anchor;
    };

    struct CriticStep
    {
        LossBreakdown loss;
        FlowGrads grads;
    };

    /// All five loss terms on the transitions `idx` with fresh noise, times and target draws
    /// from `rng`, plus the gradient of the weighted total (encoder included).
    CriticStep flow_critic_step(const FlowModel &model, const CriticData &data, std::span<const int> idx,
                                const RunConfig &cfg, Rng &rng);

    /// Algorithm loop: rollouts, distributional prediction, D-GAE, critic updates on the composite
    /// loss, scalarized PPO step, evaluation and checkpoints. An empty out_dir disables file output.
    class Trainer
    {
    public:
        Trainer(const RunConfig &cfg, std::filesystem::path out_dir);
        static Trainer resume(const std::filesystem::path &checkpoint, std::filesystem::path out_dir);

        Trainer(Trainer &&) = default;
        ~Trainer();

        /// Runs until config().iterations, then writes final.ckpt.
        void run();
        void run_iteration();

        Checkpoint snapshot() const;
        void save_checkpoint(const std::filesystem::path &path) const;

        EvalStats evaluate_policy(int episodes, bool ood, std::uint64_t seed) const;

        const RunConfig &config() const { return cfg_; }
        long long iteration() const { return iteration_; }
        long long updates() const { return update_; }
        const FlowModel &model() const { return model_; }
        FlowModel &model() { return model_; }
        const Policy &policy() const { return policy_; }
        const ScalarCritic &scalar_critic() const { return scalar_; }
        const std::vector<MetricsRow> &rows() const { return rows_; }
        Env &env() { return *env_; }

    private:
        struct Rollout
        {
            TrajectoryBatch trajectories;
            Mat observations;
            double noisy_return = 0.0;
        };

        Rollout collect();
        void flow_iteration(Rollout &ro);
        void scalar_iteration(Rollout &ro);
        void policy_step(const Rollout &ro, const std::vector<double> &advantages);
        void emit(MetricsRow row);
        void halt(const std::exception &e);
        double elapsed() const;

        RunConfig cfg_;
        std::filesystem::path out_dir_;
        std::unique_ptr<Env> env_;
        FlowModel model_;
        Policy policy_;
        ScalarCritic scalar_;
        Adam critic_opt_;
        Adam policy_opt_;
        Adam scalar_opt_;
        Rng rng_;
        long long iteration_ = 0;
        long long update_ = 0;
        std::vector<MetricsRow> rows_;
        std::unique_ptr<std::ofstream> metrics_;
        std::chrono::steady_clock::time_point start_;
    };
}
