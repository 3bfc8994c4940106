#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vflow/dist_gae.h"
#include "vflow/envs.h"
#include "vflow/losses.h"
#include "vflow/optim.h"
#include "vflow/policy.h"

namespace vflow
{
    /// Configuration failure tied to one key.
    class ConfigError : public std::invalid_argument
    {
    public:
        ConfigError(const std::string &key, const std::string &msg)
            : std::invalid_argument("config key '" + key + "': " + msg), key(key) {}
        std::string key;
    };

    enum class CriticMode
    {
        flow,
        scalar
    };

    struct RunConfig
    {
        std::string env = "noisy-chain";
        EnvParams env_params;

        GaeConfig gae;
        LossWeights weights;
        TailSpec tail;
        double tau_temp = 1.0;

        int inference_steps = 1;
        int jacobian_steps = 10;
        bool tail_multistep = false;
        Coupling coupling = Coupling::sorted;
        bool use_wconf = true;
        bool spectral_norm = true;
        int power_iters = 1;
        CriticMode critic_mode = CriticMode::flow;

        int state_dim = 16;
        int encoder_hidden = 64;
        int time_dim = 16;
        int time_hidden = 32;
        int field_hidden = 128;
        int field_depth = 2;
        double time_max_freq = 1e4;
        int policy_hidden = 64;
        int critic_hidden = 64;

        AdamConfig critic_adam;
        AdamConfig policy_adam;

        std::uint64_t seed = 0;
        int iterations = 100;
        int episodes_per_iter = 16;
        int critic_epochs = 4;
        int minibatch_size = 256;
        int tail_states_per_batch = 16;

        PolicyUpdateConfig ppo;

        int eval_interval = 10;
        int eval_episodes = 32;
        bool eval_ood = false;
        bool record_wall_time = false;
        int checkpoint_interval = 0;

        RunConfig();

        /// Throws ConfigError naming the first offending key.
        void validate() const;

        FlowShape flow_shape(int obs_dim) const;
        int tail_steps() const { return tail_multistep ? inference_steps : 1; }
    };

    /// Applies one key=value setting.
    void apply_setting(RunConfig &cfg, const std::string &key, const std::string &value);
    std::string get_setting(const RunConfig &cfg, const std::string &key);
    std::vector<std::string> config_keys();

    /// Flat key=value text: '#' starts a comment, blank lines are ignored, unknown keys are errors.
    RunConfig parse_config(const std::string &text);
    RunConfig load_config(const std::filesystem::path &path);

    /// Every key in canonical order, with exact round-trip formatting of reals.
    std::string to_text(const RunConfig &cfg);

    std::string format_real(double x);
}
