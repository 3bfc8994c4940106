// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
// Usage: acceptance [criterion-name ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vflow/runtime.h"
#include "vflow/trainer.h"
#include "vflow/verify.h"

using namespace vflow;
namespace fs = std::filesystem;

namespace
{
    struct Outcome
    {
        bool pass = false;
        std::string detail;
    };

    struct Criterion
    {
        std::string name;
        double budget_seconds;
        std::function<Outcome()> run;
    };

    std::string fmt(const char *f, auto... args)
    {
        char buf[512];
        std::snprintf(buf, sizeof buf, f, args...);
        return buf;
    }

    fs::path scratch(const std::string &name)
    {
        const fs::path p = fs::temp_directory_path() / "vflow_acceptance" / name;
        fs::remove_all(p);
        return p;
    }

    std::string slurp(const fs::path &p)
    {
        std::ifstream in(p, std::ios::binary);
        std::stringstream s;
        s << in.rdbuf();
        return s.str();
    }

    Outcome from_suites(const std::vector<SuiteResult> &suites)
    {
        Outcome o;
        o.pass = !suites.empty();
        std::ostringstream d;
        for (const SuiteResult &s : suites) {
            o.pass = o.pass && s.pass;
            d << (d.tellp() ? "; " : "") << s.name << (s.pass ? " ok " : " FAILED ") << fmt("%.2e", s.measured) << "/"
              << fmt("%.4g", s.threshold) << " n=" << s.instances;
        }
        o.detail = d.str();
        return o;
    }

    Outcome gradient_integrity()
    {
        VerifyOptions opt;
        opt.instances = 100;
        std::vector<SuiteResult> suites{suite_net_gradients(opt), suite_flow_head_gradients(opt)};
        for (auto &s : suite_loss_gradients(opt)) suites.push_back(std::move(s));
        for (auto &s : suite_policy_gradients(opt)) suites.push_back(std::move(s));
        return from_suites(suites);
    }

    Outcome contraction()
    {
        VerifyOptions opt;
        opt.contraction_pairs = 200;
        return from_suites({suite_contraction(opt, GaeConfig{}, 50)});
    }

    Outcome jacobian()
    {
        VerifyOptions opt;
        opt.instances = 100;
        return from_suites(suite_jacobian(opt));
    }

    /// One state whose every transition carries the same fixed bimodal target: K/2 supports at −1
    /// and K/2 at +3.
    CriticData bimodal_data(int transitions, int K)
    {
        CriticData d;
        d.observations = Mat::Ones(1, transitions);
        Vec v(K);
        for (int k = 0; k < K; ++k) v[k] = k < K / 2 ? -1.0 : 3.0;
        d.targets.assign(static_cast<std::size_t>(transitions), QuantileDistribution::from_sorted(v));
        d.w_conf = Vec::Ones(transitions);
        d.anchor = Vec::Constant(transitions, 1.0);
        return d;
    }

    struct StraightnessRun
    {
        double cons = 0.0;
        long steps = 0;
        double drift = 0.0;
        double gap = 0.0;
        double median_gap = 0.0;
    };

    StraightnessRun train_on_bimodal(double lambda_cons, double seconds)
    {
        // Flow matching plus consistency only, without the Lipschitz cap, so the head can split the modes.
        RunConfig cfg = parse_config("lambda_reg = 0\nlambda_risk = 0\nlambda_shape = 0\nspectral_norm = false\n"
                                     "state_dim = 8\nencoder_hidden = 16\nfield_hidden = 64\ntail_states_per_batch = 4\n");
        cfg.weights.cons = lambda_cons;
        FlowModel model(cfg.flow_shape(1), 21);
        const int N = 128;
        const CriticData data = bimodal_data(N, cfg.tail.K);
        std::vector<int> idx(N);
        std::iota(idx.begin(), idx.end(), 0);
        Adam opt(static_cast<std::size_t>(model.flat_params().size()), cfg.critic_adam);
        Rng rng(8);

        StraightnessRun out;
        const auto start = std::chrono::steady_clock::now();
        // Consistency is stochastic per batch, so the stop rule tracks a running mean.
        double avg = 1.0;
        while (true) {
            model.power_iterate(cfg.power_iters);
            const CriticStep cs = flow_critic_step(model, data, idx, cfg, rng);
            avg = out.steps == 0 ? cs.loss.cons : 0.98 * avg + 0.02 * cs.loss.cons;
            ++out.steps;
            if (out.steps >= 200 && avg < 1e-5) break;
            const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if (elapsed > seconds) break;
            Vec p = model.flat_params();
            opt.step(p, FlowModel::flatten(cs.grads));
            model.set_flat_params(p);
        }
        out.cons = avg;

        const Vec h = model.encode(Mat::Ones(1, 1)).col(0);
        const ModelField field = bind_state(model, h, 100);
        Rng zr(31);
        Vec z0(100);
        for (int i = 0; i < 100; ++i) z0[i] = zr.normal();
        FlowRecorder rec;
        const Vec z50 = solve_ivp(field, z0, 50, &rec);
        const Vec z1 = solve_ivp(field, z0, 1);
        const Vec v0 = field.velocity(z0, 0.0);
        for (const FlowRecord &r : rec) out.drift = std::max(out.drift, std::abs(r.v - v0[r.particle]));
        Vec gaps = (z1 - z50).cwiseAbs();
        std::sort(gaps.data(), gaps.data() + gaps.size());
        out.gap = gaps[gaps.size() - 1];
        out.median_gap = gaps[gaps.size() / 2];
        return out;
    }

    Outcome straight_chain()
    {
        const StraightnessRun on = train_on_bimodal(0.01, 240.0);
        const StraightnessRun off = train_on_bimodal(0.0, 240.0);
        Outcome o;
        const bool converged = on.cons < 1e-5;
        const bool a = on.drift < 1e-2, b = on.gap < 1e-2;
        const double ratio = off.gap / std::max(on.gap, 1e-300);
        o.pass = converged && a && b && ratio >= 10.0;
        o.detail = fmt("lambda_cons=0.01: cons %.2e (<1e-5) after %ld steps, max drift %.3e (<1e-2), max |1-step - 50-step| "
                       "%.3e (<1e-2, median %.3e); lambda_cons=0: cons %.2e, drift %.3e, gap %.3e (median %.3e); "
                       "gap ratio %.2f (>=10)",
                       on.cons, on.steps, on.drift, on.gap, on.median_gap, off.cons, off.drift, off.gap, off.median_gap, ratio);
        return o;
    }

    /// Supports at a state from stratified noise, so recovery is not blurred by particle draws.
    QuantileDistribution stratified_prediction(const FlowModel &model, const Vec &observation, int K, int steps)
    {
        const Vec h = model.encode(observation).col(0);
        return QuantileDistribution::from_unsorted(solve_ivp(bind_state(model, h, K), stratified_normal(K), steps));
    }

    Outcome distribution_recovery()
    {
        // The bootstrapped anchor pulls particles toward the mean and the tail terms match per-sample
        // point-mass targets, so both are off for the multi-peak run.
        const RunConfig cfg = parse_config("env = bimodal-bandit\nflip_rate = 0\nspectral_norm = false\niterations = 1500\n"
                                           "episodes_per_iter = 256\nminibatch_size = 256\neval_interval = 0\n"
                                           "lambda_reg = 0\nlambda_risk = 0\nlambda_shape = 0\nseed = 3\n");
        Trainer t(cfg, {});
        t.run();
        const int K = 50;
        const auto pred = stratified_prediction(t.model(), t.env().state_observation(0), K, 50);
        const auto &bandit = dynamic_cast<BimodalBandit &>(t.env());
        Vec truth(K);
        for (int k = 0; k < K; ++k) truth[k] = bandit.reward_quantile(0, QuantileDistribution::level(k, K));
        const double w1 = wasserstein1(pred, QuantileDistribution::from_sorted(truth));
        int low = 0, high = 0;
        for (int k = 0; k < K; ++k) {
            low += std::abs(pred[k] + 1.0) < 0.5;
            high += std::abs(pred[k] - 3.0) < 0.5;
        }
        Outcome o;
        o.pass = w1 < 0.15 && low >= 10 && high >= 10;
        o.detail = fmt("W1 %.4f (<0.15), particles near -1: %d, near +3: %d (>=10 each); 50-step inference from stratified "
                       "noise, anchor and tail terms off",
                       w1, low, high);
        return o;
    }

    double tail_quantile(const QuantileDistribution &d, double u)
    {
        // Linear interpolation between midpoint levels.
        const int K = d.size();
        const double pos = u * K - 0.5;
        const int lo = std::clamp(static_cast<int>(std::floor(pos)), 0, K - 1);
        const int hi = std::min(lo + 1, K - 1);
        const double frac = std::clamp(pos - lo, 0.0, 1.0);
        return (1.0 - frac) * d[lo] + frac * d[hi];
    }

    Outcome tail_constraint()
    {
        const std::string base = "env = cliff-grid\nflip_rate = 0\niterations = 500\nepisodes_per_iter = 8\ncritic_epochs = 2\n"
                                 "minibatch_size = 128\nK = 50\nstate_dim = 8\nencoder_hidden = 32\nfield_hidden = 64\n"
                                 "policy_hidden = 32\ntail_states_per_batch = 8\neval_interval = 0\n";
        std::ostringstream d;
        double margin_sum = 0.0;
        int lower = 0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            double q[2];
            for (int arm = 0; arm < 2; ++arm) {
                RunConfig cfg = parse_config(base + "lambda_risk = " + (arm == 0 ? "0.5" : "0") + "\n");
                cfg.seed = seed;
                Trainer t(cfg, {});
                t.run();
                const auto &grid = dynamic_cast<CliffGrid &>(t.env());
                q[arm] = tail_quantile(stratified_prediction(t.model(), grid.risky_observation(), 50, 1), 0.1);
            }
            margin_sum += q[1] - q[0];
            lower += q[0] < q[1];
            d << fmt("%sseed %d: %.3f vs %.3f", seed ? ", " : "", static_cast<int>(seed), q[0], q[1]);
        }
        Outcome o;
        const double margin = margin_sum / 5.0;
        o.pass = margin > 0.0;
        o.detail = fmt("mean paired margin %.4f (>0), lower in %d/5 seeds; 10%%-quantile with risk 0.5 vs 0: ", margin, lower) +
                   d.str();
        return o;
    }

    Outcome robustness()
    {
        const std::string base = "env = noisy-chain\nflip_rate = 0.3\niterations = 2000\nepisodes_per_iter = 8\n"
                                 "critic_epochs = 2\neval_interval = 0\n";
        std::ostringstream d;
        double margin_sum = 0.0;
        int wins = 0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            double r[2];
            for (int arm = 0; arm < 2; ++arm) {
                RunConfig cfg = parse_config(base + "critic_mode = " + (arm == 0 ? "flow" : "scalar") + "\n");
                cfg.seed = seed;
                Trainer t(cfg, {});
                t.run();
                r[arm] = t.evaluate_policy(500, false, 1000 + seed).mean_return;
            }
            margin_sum += r[0] - r[1];
            wins += r[0] > r[1];
            d << fmt("%sseed %d: %.4f vs %.4f", seed ? ", " : "", static_cast<int>(seed), r[0], r[1]);
        }
        Outcome o;
        const double margin = margin_sum / 5.0;
        o.pass = margin > 0.0;
        o.detail = fmt("mean paired margin %.4f (>0), DFPO ahead in %d/5 seeds; clean return DFPO vs scalar PPO: ", margin, wins) +
                   d.str();
        return o;
    }

    Outcome determinism()
    {
        const std::string text = "iterations = 8\nepisodes_per_iter = 4\ncritic_epochs = 2\nminibatch_size = 64\nK = 16\n"
                                 "field_hidden = 32\nencoder_hidden = 16\neval_interval = 2\neval_episodes = 8\n"
                                 "checkpoint_interval = 4\nseed = 11\n";
        const fs::path a = scratch("det_a"), b = scratch("det_b"), r = scratch("det_resume");
        Trainer(parse_config(text), a).run();
        Trainer(parse_config(text), b).run();
        Trainer resumed = Trainer::resume(a / "checkpoint-4.ckpt", r);
        resumed.run();
        const bool metrics = slurp(a / "metrics.csv") == slurp(b / "metrics.csv");
        const bool ckpt = slurp(a / "final.ckpt") == slurp(b / "final.ckpt");
        const bool resume = slurp(a / "final.ckpt") == slurp(r / "final.ckpt");
        Outcome o;
        o.pass = metrics && ckpt && resume;
        o.detail = fmt("metrics byte-identical: %s, final checkpoint identical: %s, resume from iteration 4 bit-exact: %s",
                       metrics ? "yes" : "no", ckpt ? "yes" : "no", resume ? "yes" : "no");
        return o;
    }
}

int main(int argc, char **argv)
{
    retain_heap_pages();
    const std::vector<Criterion> all{
        {"gradient-integrity", 120, gradient_integrity},
        {"gae-contraction", 60, contraction},
        {"consistency-straightness", 600, straight_chain},
        {"jacobian-oracle", 60, jacobian},
        {"distribution-recovery", 600, distribution_recovery},
        {"tail-constraint", 900, tail_constraint},
        {"noise-robustness", 1800, robustness},
        {"determinism-resume", 60, determinism},
    };
    std::vector<std::string> wanted(argv + 1, argv + argc);
    bool ok = true;
    for (const Criterion &c : all) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.name) == wanted.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception &e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.budget_seconds;
        const bool pass = o.pass && in_time;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail
                  << fmt(" [%.1f s, budget %.0f s%s]", secs, c.budget_seconds, in_time ? "" : ", over budget") << std::endl;
    }
    return ok ? 0 : 1;
}
