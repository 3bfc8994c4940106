#include "vflow/config.h"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace vflow
{
    namespace
    {
        struct Field
        {
            std::string key;
            std::function<void(RunConfig &, const std::string &)> set;
            std::function<std::string(const RunConfig &)> get;
        };

        std::string trim(const std::string &s)
        {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return {};
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        }

        template <class T>
        T parse_number(const std::string &key, const std::string &text)
        {
            T out{};
            const char *end = text.data() + text.size();
            const auto [ptr, ec] = std::from_chars(text.data(), end, out);
            if (ec != std::errc{} || ptr != end) throw ConfigError(key, "cannot parse '" + text + "' as a number");
            if constexpr (std::is_floating_point_v<T>)
                if (!std::isfinite(out)) throw ConfigError(key, "value must be finite");
            return out;
        }

        bool parse_bool(const std::string &key, const std::string &text)
        {
            if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
            if (text == "false" || text == "0" || text == "off" || text == "no") return false;
            throw ConfigError(key, "expected a boolean, got '" + text + "'");
        }

        template <class Access>
        Field real(std::string key, Access access)
        {
            return {key, [access, key](RunConfig &c, const std::string &v) { access(c) = parse_number<double>(key, v); },
                    [access](const RunConfig &c) { return format_real(access(const_cast<RunConfig &>(c))); }};
        }

        template <class Access>
        Field integer(std::string key, Access access)
        {
            return {key, [access, key](RunConfig &c, const std::string &v) { access(c) = parse_number<int>(key, v); },
                    [access](const RunConfig &c) { return std::to_string(access(const_cast<RunConfig &>(c))); }};
        }

        template <class Access>
        Field boolean(std::string key, Access access)
        {
            return {key, [access, key](RunConfig &c, const std::string &v) { access(c) = parse_bool(key, v); },
                    [access](const RunConfig &c) { return std::string(access(const_cast<RunConfig &>(c)) ? "true" : "false"); }};
        }

#define VF_REF(expr) [](RunConfig &c) -> auto & { return c.expr; }

        const std::vector<Field> &fields()
        {
            static const std::vector<Field> table = {
                {"env", [](RunConfig &c, const std::string &v) { c.env = v; }, [](const RunConfig &c) { return c.env; }},
                integer("chain_length", VF_REF(env_params.chain_length)),
                integer("max_steps", VF_REF(env_params.max_steps)),
                real("goal_reward", VF_REF(env_params.goal_reward)),
                real("bandit_low", VF_REF(env_params.bandit_low)),
                real("bandit_high", VF_REF(env_params.bandit_high)),
                real("bandit_high_prob0", VF_REF(env_params.bandit_high_prob0)),
                real("bandit_high_prob1", VF_REF(env_params.bandit_high_prob1)),
                integer("grid_width", VF_REF(env_params.grid_width)),
                integer("grid_height", VF_REF(env_params.grid_height)),
                real("cliff_prob", VF_REF(env_params.cliff_prob)),
                real("cliff_penalty", VF_REF(env_params.cliff_penalty)),
                {"noise_mode",
                 [](RunConfig &c, const std::string &v) {
                     try {
                         c.env_params.noise.mode = parse_noise_mode(v);
                     } catch (const std::invalid_argument &) {
                         throw ConfigError("noise_mode", "expected sign-flip, dropout or gaussian, got '" + v + "'");
                     }
                 },
                 [](const RunConfig &c) { return to_string(c.env_params.noise.mode); }},
                real("flip_rate", VF_REF(env_params.noise.flip_rate)),
                real("noise_sigma", VF_REF(env_params.noise.sigma)),
                {"ood_seed", [](RunConfig &c, const std::string &v) { c.env_params.ood_seed = parse_number<std::uint64_t>("ood_seed", v); },
                 [](const RunConfig &c) { return std::to_string(c.env_params.ood_seed); }},

                real("gamma", VF_REF(gae.gamma)),
                real("lambda", VF_REF(gae.lam)),
                real("lambda_reg", VF_REF(weights.reg)),
                real("lambda_cons", VF_REF(weights.cons)),
                real("lambda_risk", VF_REF(weights.risk)),
                real("lambda_shape", VF_REF(weights.shape)),
                real("alpha", VF_REF(tail.alpha)),
                real("beta", VF_REF(tail.beta)),
                integer("K", VF_REF(tail.K)),
                real("tau_temp", VF_REF(tau_temp)),

                integer("inference_steps", VF_REF(inference_steps)),
                integer("jacobian_steps", VF_REF(jacobian_steps)),
                boolean("tail_multistep", VF_REF(tail_multistep)),
                {"coupling",
                 [](RunConfig &c, const std::string &v) {
                     if (v == "independent") c.coupling = Coupling::independent;
                     else if (v == "sorted") c.coupling = Coupling::sorted;
                     else throw ConfigError("coupling", "expected independent or sorted, got '" + v + "'");
                 },
                 [](const RunConfig &c) { return std::string(c.coupling == Coupling::sorted ? "sorted" : "independent"); }},
                boolean("use_wconf", VF_REF(use_wconf)),
                boolean("spectral_norm", VF_REF(spectral_norm)),
                integer("power_iters", VF_REF(power_iters)),
                {"critic_mode",
                 [](RunConfig &c, const std::string &v) {
                     if (v == "flow") c.critic_mode = CriticMode::flow;
                     else if (v == "scalar") c.critic_mode = CriticMode::scalar;
                     else throw ConfigError("critic_mode", "expected flow or scalar, got '" + v + "'");
                 },
                 [](const RunConfig &c) { return std::string(c.critic_mode == CriticMode::flow ? "flow" : "scalar"); }},

                integer("state_dim", VF_REF(state_dim)),
                integer("encoder_hidden", VF_REF(encoder_hidden)),
                integer("time_dim", VF_REF(time_dim)),
                integer("time_hidden", VF_REF(time_hidden)),
                integer("field_hidden", VF_REF(field_hidden)),
                integer("field_depth", VF_REF(field_depth)),
                real("time_max_freq", VF_REF(time_max_freq)),
                integer("policy_hidden", VF_REF(policy_hidden)),
                integer("critic_hidden", VF_REF(critic_hidden)),

                real("lr", VF_REF(critic_adam.step_size)),
                real("policy_lr", VF_REF(policy_adam.step_size)),
                {"adam_beta1",
                 [](RunConfig &c, const std::string &v) { c.critic_adam.beta1 = c.policy_adam.beta1 = parse_number<double>("adam_beta1", v); },
                 [](const RunConfig &c) { return format_real(c.critic_adam.beta1); }},
                {"adam_beta2",
                 [](RunConfig &c, const std::string &v) { c.critic_adam.beta2 = c.policy_adam.beta2 = parse_number<double>("adam_beta2", v); },
                 [](const RunConfig &c) { return format_real(c.critic_adam.beta2); }},

                {"seed", [](RunConfig &c, const std::string &v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig &c) { return std::to_string(c.seed); }},
                integer("iterations", VF_REF(iterations)),
                integer("episodes_per_iter", VF_REF(episodes_per_iter)),
                integer("critic_epochs", VF_REF(critic_epochs)),
                integer("minibatch_size", VF_REF(minibatch_size)),
                integer("tail_states_per_batch", VF_REF(tail_states_per_batch)),

                real("clip_epsilon", VF_REF(ppo.clip.epsilon)),
                real("entropy_coef", VF_REF(ppo.entropy_coef)),
                boolean("normalize_advantages", VF_REF(ppo.normalize)),

                integer("eval_interval", VF_REF(eval_interval)),
                integer("eval_episodes", VF_REF(eval_episodes)),
                boolean("eval_ood", VF_REF(eval_ood)),
                boolean("record_wall_time", VF_REF(record_wall_time)),
                integer("checkpoint_interval", VF_REF(checkpoint_interval)),
            };
            return table;
        }

#undef VF_REF

        const Field &find_field(const std::string &key)
        {
            for (const Field &f : fields())
                if (f.key == key) return f;
            throw ConfigError(key, "unknown key");
        }

        void require(bool ok, const char *key, const char *msg)
        {
            if (!ok) throw ConfigError(key, msg);
        }
    }

    std::string format_real(double x)
    {
        char buf[64];
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
        return std::string(buf, ptr);
    }

    RunConfig::RunConfig() { env_params.noise.flip_rate = 0.3; }

    void RunConfig::validate() const
    {
        require(env == "noisy-chain" || env == "bimodal-bandit" || env == "cliff-grid", "env",
                "expected noisy-chain, bimodal-bandit or cliff-grid");
        require(env_params.chain_length >= 2, "chain_length", "must be >= 2");
        require(env_params.max_steps >= 0, "max_steps", "must be >= 0");
        require(env_params.bandit_low <= env_params.bandit_high, "bandit_low", "must not exceed bandit_high");
        require(env_params.bandit_high_prob0 >= 0 && env_params.bandit_high_prob0 <= 1, "bandit_high_prob0", "must lie in [0, 1]");
        require(env_params.bandit_high_prob1 >= 0 && env_params.bandit_high_prob1 <= 1, "bandit_high_prob1", "must lie in [0, 1]");
        require(env_params.grid_width >= 3, "grid_width", "must be >= 3");
        require(env_params.grid_height >= 2, "grid_height", "must be >= 2");
        require(env_params.cliff_prob >= 0 && env_params.cliff_prob <= 1, "cliff_prob", "must lie in [0, 1]");
        require(env_params.cliff_penalty >= 0, "cliff_penalty", "must be >= 0");
        require(env_params.noise.flip_rate >= 0 && env_params.noise.flip_rate <= 1, "flip_rate", "must lie in [0, 1]");
        require(env_params.noise.sigma >= 0, "noise_sigma", "must be >= 0");

        require(gae.gamma >= 0 && gae.gamma <= 1, "gamma", "must lie in [0, 1]");
        require(gae.lam >= 0 && gae.lam <= 1, "lambda", "must lie in [0, 1]");
        require(weights.reg >= 0, "lambda_reg", "must be >= 0");
        require(weights.cons >= 0, "lambda_cons", "must be >= 0");
        require(weights.risk >= 0, "lambda_risk", "must be >= 0");
        require(weights.shape >= 0, "lambda_shape", "must be >= 0");
        require(tail.alpha > 0 && tail.alpha < 1, "alpha", "must lie in (0, 1)");
        require(tail.beta > 0 && tail.beta < 1, "beta", "must lie in (0, 1)");
        require(tail.K >= 4, "K", "must be >= 4");
        require(tau_temp > 0, "tau_temp", "must be > 0");

        require(inference_steps >= 1, "inference_steps", "must be >= 1");
        require(jacobian_steps >= 1, "jacobian_steps", "must be >= 1");
        require(power_iters >= 1, "power_iters", "must be >= 1");

        require(state_dim >= 1, "state_dim", "must be >= 1");
        require(encoder_hidden >= 1, "encoder_hidden", "must be >= 1");
        require(time_dim >= 2 && time_dim % 2 == 0, "time_dim", "must be a positive even number");
        require(time_hidden >= 1, "time_hidden", "must be >= 1");
        require(field_hidden >= 1, "field_hidden", "must be >= 1");
        require(field_depth >= 1, "field_depth", "must be >= 1");
        require(time_max_freq >= 1, "time_max_freq", "must be >= 1");
        require(policy_hidden >= 1, "policy_hidden", "must be >= 1");
        require(critic_hidden >= 1, "critic_hidden", "must be >= 1");

        require(critic_adam.step_size > 0, "lr", "must be > 0");
        require(policy_adam.step_size > 0, "policy_lr", "must be > 0");
        require(critic_adam.beta1 >= 0 && critic_adam.beta1 < 1, "adam_beta1", "must lie in [0, 1)");
        require(critic_adam.beta2 >= 0 && critic_adam.beta2 < 1, "adam_beta2", "must lie in [0, 1)");

        require(iterations >= 0, "iterations", "must be >= 0");
        require(episodes_per_iter >= 1, "episodes_per_iter", "must be >= 1");
        require(critic_epochs >= 0, "critic_epochs", "must be >= 0");
        require(minibatch_size >= 1, "minibatch_size", "must be >= 1");
        require(tail_states_per_batch >= 0, "tail_states_per_batch", "must be >= 0");

        require(ppo.clip.epsilon > 0 && ppo.clip.epsilon < 1, "clip_epsilon", "must lie in (0, 1)");
        require(ppo.entropy_coef >= 0, "entropy_coef", "must be >= 0");

        require(eval_interval >= 0, "eval_interval", "must be >= 0");
        require(eval_episodes >= 1, "eval_episodes", "must be >= 1");
        require(checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0");
    }

    FlowShape RunConfig::flow_shape(int obs_dim) const
    {
        FlowShape s;
        s.obs_dim = obs_dim;
        s.state_dim = state_dim;
        s.encoder_hidden = encoder_hidden;
        s.time_dim = time_dim;
        s.time_hidden = time_hidden;
        s.field_hidden = field_hidden;
        s.field_depth = field_depth;
        s.time_max_freq = time_max_freq;
        s.spectral = spectral_norm;
        return s;
    }

    void apply_setting(RunConfig &cfg, const std::string &key, const std::string &value)
    {
        find_field(key).set(cfg, value);
    }

    std::string get_setting(const RunConfig &cfg, const std::string &key) { return find_field(key).get(cfg); }

    std::vector<std::string> config_keys()
    {
        std::vector<std::string> keys;
        for (const Field &f : fields()) keys.push_back(f.key);
        return keys;
    }

    RunConfig parse_config(const std::string &text)
    {
        RunConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(line, "line " + std::to_string(lineno) + " is not of the form key=value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (value.empty()) throw ConfigError(key, "missing value");
            apply_setting(cfg, key, value);
        }
        cfg.validate();
        return cfg;
    }

    RunConfig load_config(const std::filesystem::path &path)
    {
        std::ifstream in(path);
        if (!in) throw ConfigError("config", "cannot open " + path.string());
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_config(buf.str());
    }

    std::string to_text(const RunConfig &cfg)
    {
        std::string out;
        for (const Field &f : fields()) out += f.key + "=" + f.get(cfg) + "\n";
        return out;
    }
}
