#include "vflow/dist_gae.h"

#include <cmath>
#include <stdexcept>

#include <Eigen/LU>

namespace vflow
{
    void GaeConfig::validate() const
    {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
        if (!(lam >= 0.0 && lam <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    }

    DistAdvantage dist_td(double reward, const QuantileDistribution &z_next, const QuantileDistribution &z_curr,
                          double gamma, bool terminal)
    {
        if (!terminal && z_next.size() != z_curr.size()) throw std::invalid_argument("dist_td: length mismatch");
        DistAdvantage out;
        out.values = Vec::Constant(z_curr.size(), reward) - z_curr.supports();
        if (!terminal) out.values += gamma * z_next.supports();
        return out;
    }

    std::vector<DistAdvantage> dist_gae_backward(const Trajectory &traj, const GaeConfig &cfg)
    {
        const std::size_t T = traj.size();
        if (T == 0) throw std::invalid_argument("dist_gae_backward: empty trajectory");
        if (traj.predicted.size() != T) throw std::invalid_argument("dist_gae_backward: missing predicted distributions");
        if (!traj.terminal && traj.bootstrap.size() != traj.predicted.front().size())
            throw std::invalid_argument("dist_gae_backward: truncated trajectory needs a bootstrap distribution");
        std::vector<DistAdvantage> adv(T);
        const double decay = cfg.gamma * cfg.lam;
        Vec running = Vec::Zero(traj.predicted.front().size());
        for (std::size_t i = T; i-- > 0;) {
            const bool last = i + 1 == T;
            const QuantileDistribution &next = last ? traj.bootstrap : traj.predicted[i + 1];
            DistAdvantage delta = dist_td(traj.rewards[i], next, traj.predicted[i], cfg.gamma, last && traj.terminal);
            running = delta.values + decay * running;
            adv[i].values = running;
        }
        return adv;
    }

    QuantileDistribution target_returns(const QuantileDistribution &pred, const DistAdvantage &adv)
    {
        if (pred.size() != adv.values.size()) throw std::invalid_argument("target_returns: length mismatch");
        return QuantileDistribution::from_unsorted(pred.supports() + adv.values);
    }

    double scalarize(const DistAdvantage &adv)
    {
        if (adv.values.size() == 0) throw std::invalid_argument("scalarize: empty advantage");
        return adv.values.mean();
    }

    double wasserstein1(const QuantileDistribution &a, const QuantileDistribution &b)
    {
        if (a.size() != b.size() || a.size() == 0) throw std::invalid_argument("wasserstein1: length mismatch");
        return (a.supports() - b.supports()).cwiseAbs().mean();
    }

    std::vector<double> scalar_gae(const std::vector<double> &rewards, const std::vector<double> &values,
                                   double bootstrap, bool terminal, const GaeConfig &cfg)
    {
        const std::size_t T = rewards.size();
        if (T == 0 || values.size() != T) throw std::invalid_argument("scalar_gae: size mismatch");
        std::vector<double> adv(T);
        double running = 0.0;
        for (std::size_t i = T; i-- > 0;) {
            const bool last = i + 1 == T;
            const double next = last ? (terminal ? 0.0 : bootstrap) : values[i + 1];
            const double delta = rewards[i] + cfg.gamma * next - values[i];
            running = delta + cfg.gamma * cfg.lam * running;
            adv[i] = running;
        }
        return adv;
    }

    std::vector<QuantileDistribution> gae_operator(const QuantileMdp &mdp, const std::vector<QuantileDistribution> &Z,
                                                   const GaeConfig &cfg)
    {
        const int S = mdp.size();
        if (static_cast<int>(Z.size()) != S || static_cast<int>(mdp.reward.size()) != S)
            throw std::invalid_argument("gae_operator: state count mismatch");
        const int K = Z.front().size();
        Mat P = Mat::Zero(S, S);
        for (int s = 0; s < S; ++s) {
            const int n = mdp.next[static_cast<std::size_t>(s)];
            if (n >= S) throw std::invalid_argument("gae_operator: next state out of range");
            if (n >= 0) P(s, n) = 1.0;
        }
        Mat Zm(S, K);
        for (int s = 0; s < S; ++s) {
            if (Z[static_cast<std::size_t>(s)].size() != K) throw std::invalid_argument("gae_operator: K mismatch");
            Zm.row(s) = Z[static_cast<std::size_t>(s)].supports().transpose();
        }
        Vec r(S);
        for (int s = 0; s < S; ++s) r[s] = mdp.reward[static_cast<std::size_t>(s)];
        const Mat A = Mat::Identity(S, S) - cfg.gamma * cfg.lam * P;
        Mat rhs = cfg.gamma * (1.0 - cfg.lam) * P * Zm;
        rhs.colwise() += r;
        const Mat G = A.partialPivLu().solve(rhs);
        std::vector<QuantileDistribution> out;
        out.reserve(static_cast<std::size_t>(S));
        for (int s = 0; s < S; ++s) out.push_back(QuantileDistribution::from_unsorted(G.row(s).transpose()));
        return out;
    }

    double contraction_modulus(const GaeConfig &cfg)
    {
        return cfg.gamma * (1.0 - cfg.lam) / (1.0 - cfg.lam * cfg.gamma);
    }

    double sup_wasserstein1(const std::vector<QuantileDistribution> &a, const std::vector<QuantileDistribution> &b)
    {
        if (a.size() != b.size()) throw std::invalid_argument("sup_wasserstein1: state count mismatch");
        double m = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, wasserstein1(a[i], b[i]));
        return m;
    }
}
