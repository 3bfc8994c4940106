#include "vflow/policy.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vflow/dist_gae.h"
#include "vflow/flow_head.h"

namespace vflow
{
    void ClipConfig::validate() const
    {
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("clip_epsilon must lie in (0, 1)");
    }

    double PolicyOutput::log_prob(int action) const
    {
        const double m = logits.maxCoeff();
        return logits[action] - m - std::log((logits.array() - m).exp().sum());
    }

    PolicyOutput policy_output(const Vec &logits)
    {
        PolicyOutput out;
        out.logits = logits;
        const double m = logits.maxCoeff();
        Vec e = (logits.array() - m).exp();
        out.probs = e / e.sum();
        const Vec logp = (logits.array() - m) - std::log(e.sum());
        out.entropy = std::max(0.0, -out.probs.dot(logp));
        return out;
    }

    Policy::Policy(int obs_dim, int actions, int hidden, std::uint64_t seed)
    {
        std::mt19937_64 rng(seed);
        const int sizes[] = {obs_dim, hidden, hidden, actions};
        net = Mlp(sizes, Activation::mish, Activation::identity, false, rng);
    }

    PolicyOutput Policy::output(const Vec &obs) const { return policy_output(net.forward(obs).col(0)); }

    int Policy::act(const Vec &obs, Rng &rng, double *log_prob) const
    {
        const PolicyOutput out = output(obs);
        const double u = rng.uniform();
        int a = 0;
        double acc = out.probs[0];
        while (a + 1 < out.probs.size() && u >= acc) acc += out.probs[++a];
        if (log_prob) *log_prob = out.log_prob(a);
        return a;
    }

    int Policy::greedy(const Vec &obs) const
    {
        Eigen::Index a = 0;
        net.forward(obs).col(0).maxCoeff(&a);
        return static_cast<int>(a);
    }

    double ppo_surrogate(double ratio, double adv, double eps)
    {
        if (!(ratio > 0.0)) throw std::invalid_argument("ppo_surrogate: ratio must be positive");
        return std::min(ratio * adv, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv);
    }

    void normalize_advantages(std::vector<double> &adv)
    {
        if (adv.empty()) return;
        double mean = 0.0;
        for (double a : adv) mean += a;
        mean /= static_cast<double>(adv.size());
        double var = 0.0;
        for (double a : adv) var += (a - mean) * (a - mean);
        const double sd = std::sqrt(var / static_cast<double>(adv.size()));
        for (double &a : adv) a = sd >= 1e-8 ? (a - mean) / sd : a - mean;
    }

    PolicyObjective policy_objective(const Policy &policy, const PolicyBatch &batch, const PolicyUpdateConfig &cfg)
    {
        const auto n = static_cast<Eigen::Index>(batch.actions.size());
        if (n == 0 || batch.observations.cols() != n || batch.old_log_probs.size() != batch.actions.size() ||
            batch.advantages.size() != batch.actions.size())
            throw std::invalid_argument("policy_objective: batch size mismatch");
        const double eps = cfg.clip.epsilon;
        MlpTape tape;
        const Mat logits = policy.net.forward(batch.observations, tape);
        Mat dlogits(logits.rows(), n);
        PolicyObjective out;
        int clipped = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const PolicyOutput po = policy_output(logits.col(i));
            const int a = batch.actions[i];
            const double adv = batch.advantages[i];
            const double ratio = std::exp(po.log_prob(a) - batch.old_log_probs[i]);
            const double surr = ppo_surrogate(ratio, adv, eps);
            const bool active = ratio * adv <= std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
            if (!active) ++clipped;
            out.surrogate += surr;
            out.entropy += po.entropy;

            // d(surrogate)/d(logits) = ratio·adv·(onehot - p) on the unclipped branch.
            Vec g = Vec::Zero(logits.rows());
            if (active) {
                g = -po.probs;
                g[a] += 1.0;
                g *= ratio * adv;
            }
            const Vec logp = po.probs.array().max(1e-300).log();
            const Vec dH = -po.probs.cwiseProduct((logp.array() + po.entropy).matrix());
            dlogits.col(i) = -(g + cfg.entropy_coef * dH) / static_cast<double>(n);
        }
        out.surrogate /= static_cast<double>(n);
        out.entropy /= static_cast<double>(n);
        out.loss = -(out.surrogate + cfg.entropy_coef * out.entropy);
        out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
        MlpGrads grads = policy.net.zero_grads();
        policy.net.backward(tape, dlogits, &grads);
        out.grad = flatten_grads(grads);
        return out;
    }

    PolicyObjective policy_update(Policy &policy, Adam &optimizer, PolicyBatch batch, const PolicyUpdateConfig &cfg,
                                  long long batch_id)
    {
        cfg.clip.validate();
        if (cfg.normalize) normalize_advantages(batch.advantages);
        PolicyObjective obj = policy_objective(policy, batch, cfg);
        if (!obj.grad.allFinite()) throw NumericalError("policy_update: non-finite policy gradient in batch", batch_id);
        Vec params = flatten_params(policy.net);
        optimizer.step(params, obj.grad);
        unflatten_params(policy.net, params);
        return obj;
    }

    ScalarCritic::ScalarCritic(int obs_dim, int hidden, std::uint64_t seed)
    {
        std::mt19937_64 rng(seed);
        const int sizes[] = {obs_dim, hidden, hidden, 1};
        net = Mlp(sizes, Activation::mish, Activation::identity, false, rng);
    }

    Vec ScalarCritic::values(const Mat &observations) const { return net.forward(observations).row(0).transpose(); }

    double ScalarCritic::value(const Vec &obs) const { return net.forward(obs)(0, 0); }

    double ScalarCritic::loss(const Mat &observations, const Vec &targets, Vec *grad) const
    {
        if (observations.cols() != targets.size()) throw std::invalid_argument("ScalarCritic::loss: size mismatch");
        MlpTape tape;
        const Vec pred = net.forward(observations, tape).row(0).transpose();
        const Vec r = pred - targets;
        const auto n = static_cast<double>(targets.size());
        if (grad) {
            MlpGrads g = net.zero_grads();
            net.backward(tape, (2.0 / n) * r.transpose(), &g);
            *grad = flatten_grads(g);
        }
        return r.squaredNorm() / n;
    }

    std::vector<double> scalar_critic_targets(const std::vector<double> &rewards, const std::vector<double> &values,
                                              double bootstrap, bool terminal, double gamma, double lam)
    {
        std::vector<double> out = scalar_gae(rewards, values, bootstrap, terminal, GaeConfig{gamma, lam});
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += values[i];
        return out;
    }
}
