// Command-line front end: train, eval, verify, ablate, export-flow.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "vflow/ablation.h"
#include "vflow/export.h"
#include "vflow/runtime.h"
#include "vflow/trainer.h"
#include "vflow/verify.h"

namespace fs = std::filesystem;
using namespace vflow;

namespace
{
    struct Options
    {
        std::string config;
        std::optional<std::uint64_t> seed;
        std::string out_dir;
        std::string checkpoint;
        std::string matrix = "loss-components";
        int steps = 50;
        std::optional<int> particles;
        int state_index = 0;
    };

    RunConfig config_from(const Options &o)
    {
        RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
        if (o.seed) cfg.seed = *o.seed;
        cfg.validate();
        return cfg;
    }

    fs::path out_dir_from(const Options &o, const char *fallback)
    {
        if (!o.out_dir.empty()) return o.out_dir;
        if (const char *env = std::getenv("VALUEFLOW_OUT_DIR"); env && *env) return env;
        return fallback;
    }

    int cmd_train(const Options &o)
    {
        const fs::path out = out_dir_from(o, "runs/train");
        if (!o.checkpoint.empty()) {
            if (!o.config.empty() || o.seed) throw std::invalid_argument("--checkpoint resumes with the saved config; drop --config/--seed");
            Trainer t = Trainer::resume(o.checkpoint, out);
            t.run();
            std::cout << "resumed to iteration " << t.iteration() << "; outputs in " << out.string() << "\n";
            return 0;
        }
        Trainer t(config_from(o), out);
        t.run();
        std::cout << "trained " << t.iteration() << " iterations (" << t.updates() << " critic updates); outputs in "
                  << out.string() << "\n";
        return 0;
    }

    int cmd_eval(const Options &o)
    {
        if (o.checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint");
        Trainer t = Trainer::resume(o.checkpoint, {});
        const RunConfig &cfg = t.config();
        const std::uint64_t seed = o.seed.value_or(cfg.seed);
        const EvalStats in = t.evaluate_policy(cfg.eval_episodes, false, seed);
        const EvalStats ood = t.evaluate_policy(cfg.eval_episodes, true, seed);
        std::printf("split,episodes,mean_return,std_error,q10,q50,q90\n");
        std::ostringstream csv;
        csv << "split,episodes,mean_return,std_error,q10,q50,q90\n";
        for (const auto &[name, s] : {std::pair<const char *, const EvalStats &>{"in-distribution", in}, {"ood", ood}}) {
            std::ostringstream line;
            line << name << "," << cfg.eval_episodes << "," << format_real(s.mean_return) << "," << format_real(s.std_error)
                 << "," << format_real(s.quantile(0.1)) << "," << format_real(s.quantile(0.5)) << ","
                 << format_real(s.quantile(0.9)) << "\n";
            std::cout << line.str();
            csv << line.str();
        }
        if (!o.out_dir.empty() || std::getenv("VALUEFLOW_OUT_DIR")) {
            const fs::path out = out_dir_from(o, ".");
            fs::create_directories(out);
            std::ofstream(out / "eval.csv") << csv.str();
        }
        return 0;
    }

    int cmd_verify(const Options &o)
    {
        const RunConfig cfg = config_from(o);
        VerifyOptions opt;
        opt.seed = cfg.seed;
        const auto results = run_verify(cfg, opt);
        std::cout << format_suite_table(results);
        bool ok = true;
        for (const auto &r : results) ok = ok && r.pass;
        std::cout << (ok ? "all suites passed\n" : "some suites FAILED\n");
        return ok ? 0 : 1;
    }

    int cmd_ablate(const Options &o)
    {
        const RunConfig base = config_from(o);
        AblationMatrix m;
        if (fs::exists(o.matrix)) {
            std::ifstream in(o.matrix);
            std::stringstream buf;
            buf << in.rdbuf();
            m = parse_ablation_matrix(buf.str(), fs::path(o.matrix).stem().string());
        } else {
            m = ablation_preset(o.matrix);
        }
        const fs::path out = out_dir_from(o, "runs/ablate");
        const auto results = run_ablation(base, m, out);
        for (const auto &r : results)
            std::cout << r.name << ": " << (r.ok ? "ok, final clean return " + format_real(r.final_clean_return) : "failed: " + r.error)
                      << "\n";
        std::cout << "summary written to " << (out / "summary.csv").string() << "\n";
        return 0;
    }

    int cmd_export(const Options &o)
    {
        if (o.checkpoint.empty()) throw std::invalid_argument("export-flow needs --checkpoint");
        Trainer t = Trainer::resume(o.checkpoint, {});
        const int particles = o.particles.value_or(t.config().tail.K);
        const Vec obs = t.env().state_observation(o.state_index);
        const fs::path out = out_dir_from(o, "runs/export");
        const FlowExport e = export_flow(t.model(), obs, o.state_index, particles, o.steps, o.seed.value_or(t.config().seed), out);
        std::cout << "wrote " << e.records << " flow records, " << particles << " quantiles and a velocity grid to "
                  << out.string() << "\n";
        return 0;
    }
}

int main(int argc, char **argv)
{
    vflow::retain_heap_pages();
    CLI::App app{"Distributional value-flow policy optimization on synthetic noisy-reward environments.\n"
                 "VALUEFLOW_OUT_DIR is used when --out-dir is not given."};
    app.require_subcommand(1);
    Options o;

    auto add_config = [&](CLI::App *c) { c->add_option("--config", o.config, "flat key=value run configuration")->check(CLI::ExistingFile); };
    auto add_seed = [&](CLI::App *c) { c->add_option("--seed", o.seed, "seed override"); };
    auto add_out = [&](CLI::App *c) { c->add_option("--out-dir", o.out_dir, "output directory (fallback: $VALUEFLOW_OUT_DIR)"); };

    auto *train = app.add_subcommand("train", "train a policy, writing metrics.csv and checkpoints");
    add_config(train);
    add_seed(train);
    add_out(train);
    train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint")->check(CLI::ExistingFile);

    auto *eval = app.add_subcommand("eval", "evaluate a checkpoint's policy on clean rewards, in and out of distribution");
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
    add_seed(eval);
    add_out(eval);

    auto *verify = app.add_subcommand("verify", "run the property suites and print a pass/fail table");
    add_config(verify);
    add_seed(verify);

    auto *ablate = app.add_subcommand("ablate", "run an ablation matrix and write summary.csv");
    add_config(ablate);
    add_seed(ablate);
    add_out(ablate);
    ablate->add_option("--matrix", o.matrix, "preset (sampling-steps, risk-interval, consistency-weight, loss-components) or matrix file")
        ->capture_default_str();

    auto *exp = app.add_subcommand("export-flow", "dump flow trajectories, quantiles and a velocity grid for one state");
    exp->add_option("--checkpoint", o.checkpoint, "checkpoint holding the flow head")->required()->check(CLI::ExistingFile);
    exp->add_option("--steps", o.steps, "Euler steps")->capture_default_str()->check(CLI::PositiveNumber);
    exp->add_option("--particles", o.particles, "noise particles (default: K)")->check(CLI::PositiveNumber);
    exp->add_option("--state-index", o.state_index, "environment state to export")->capture_default_str();
    add_seed(exp);
    add_out(exp);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*verify) return cmd_verify(o);
        if (*ablate) return cmd_ablate(o);
        if (*exp) return cmd_export(o);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
