#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "vflow/checkpoint.h"
#include "vflow/config.h"

using namespace vflow;

namespace
{
    std::string error_key(const std::string &text)
    {
        try {
            parse_config(text);
        } catch (const ConfigError &e) {
            return e.key;
        }
        return "";
    }
}

TEST_SUITE("config")
{
    TEST_CASE("empty file gives the documented defaults")
    {
        const RunConfig c = parse_config("");
        CHECK(c.weights.reg == 0.1);
        CHECK(c.weights.cons == 0.01);
        CHECK(c.weights.risk == 0.5);
        CHECK(c.weights.shape == 0.5);
        CHECK(c.tail.alpha == 0.1);
        CHECK(c.tail.beta == 0.1);
        CHECK(c.tail.K == 50);
        CHECK(c.jacobian_steps == 10);
        CHECK(c.inference_steps == 1);
        CHECK(c.tau_temp == 1.0);
        CHECK(c.gae.gamma == 0.99);
        CHECK(c.gae.lam == 0.95);
        CHECK(c.ppo.clip.epsilon == 0.2);
        CHECK(c.ppo.entropy_coef == 0.01);
        CHECK(c.critic_adam.step_size == 3e-4);
        CHECK(c.critic_adam.beta1 == 0.9);
        CHECK(c.critic_adam.beta2 == 0.999);
        CHECK(c.minibatch_size == 256);
        CHECK(c.critic_epochs == 4);
        CHECK(c.env_params.noise.flip_rate == 0.3);
        CHECK(c.field_depth == 2);
        CHECK(c.field_hidden == 128);
    }

    TEST_CASE("range violations name the key")
    {
        CHECK(error_key("alpha = 1.5") == "alpha");
        CHECK(error_key("beta=0") == "beta");
        CHECK(error_key("gamma = 1.01") == "gamma");
        CHECK(error_key("flip_rate = -0.1") == "flip_rate");
        CHECK(error_key("K = 1") == "K");
        CHECK(error_key("lambda_risk = -1") == "lambda_risk");
        CHECK(error_key("tau_temp = 0") == "tau_temp");
        CHECK(error_key("inference_steps = 0") == "inference_steps");
        CHECK(error_key("time_dim = 7") == "time_dim");
        CHECK(error_key("env = maze") == "env");
        CHECK(error_key("iterations = lots") == "iterations");
        CHECK(error_key("spectral_norm = maybe") == "spectral_norm");
    }

    TEST_CASE("accepted settings")
    {
        CHECK(parse_config("inference_steps=20").inference_steps == 20);
        const RunConfig c = parse_config("# comment\n\nenv = cliff-grid   # trailing\nnoise_mode = dropout\ncoupling = independent\n"
                                         "critic_mode = scalar\nspectral_norm = false\nseed = 9\n");
        CHECK(c.env == "cliff-grid");
        CHECK(c.env_params.noise.mode == NoiseMode::dropout);
        CHECK(c.coupling == Coupling::independent);
        CHECK(c.critic_mode == CriticMode::scalar);
        CHECK_FALSE(c.spectral_norm);
        CHECK(c.seed == 9);
    }

    TEST_CASE("unknown keys and malformed lines are rejected")
    {
        CHECK(error_key("learning_rate = 0.1") == "learning_rate");
        CHECK_THROWS_AS(parse_config("alpha"), ConfigError);
        CHECK(error_key("alpha =") == "alpha");
    }

    TEST_CASE("text form round-trips exactly")
    {
        RunConfig c;
        apply_setting(c, "lr", "0.000123456789");
        apply_setting(c, "alpha", "0.07");
        apply_setting(c, "env", "bimodal-bandit");
        apply_setting(c, "seed", "18446744073709551615");
        const RunConfig d = parse_config(to_text(c));
        CHECK(to_text(d) == to_text(c));
        for (const auto &k : config_keys()) CHECK(get_setting(d, k) == get_setting(c, k));
        CHECK(d.critic_adam.step_size == 0.000123456789);
        CHECK(d.seed == 18446744073709551615ull);
        CHECK(format_real(0.1) == "0.1");
    }

    TEST_CASE("load_config reports missing files")
    {
        CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
    }
}

TEST_SUITE("config")
{
    TEST_CASE("checkpoint container round-trips bit-exactly")
    {
        const auto path = std::filesystem::temp_directory_path() / "vflow_ckpt_roundtrip.ckpt";
        Checkpoint c;
        c.meta = {{"iteration", "12"}, {"rng", "1 2 3"}};
        c.config_text = "alpha=0.1\nK=50\n";
        Vec a(4);
        a << 0.1, -3.5e-300, 1e308, -0.0;
        c.arrays = {{"flow.params", a}, {"empty", Vec()}};
        write_checkpoint(path, c);
        const Checkpoint d = read_checkpoint(path);
        CHECK(d.meta == c.meta);
        CHECK(d.config_text == c.config_text);
        REQUIRE(d.arrays.size() == 2);
        CHECK(std::memcmp(d.array("flow.params").data(), a.data(), sizeof(double) * 4) == 0);
        CHECK(d.array("empty").size() == 0);
        CHECK_THROWS_AS(d.array("nope"), std::runtime_error);
        CHECK_THROWS_AS(d.meta_value("nope"), std::runtime_error);

        std::ofstream(path) << "NOTACHECKPOINT\n";
        CHECK_THROWS_AS(read_checkpoint(path), std::runtime_error);
        std::filesystem::remove(path);
    }
}
