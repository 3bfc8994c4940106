#include "vflow/losses.h"

#include <cmath>
#include <stdexcept>

namespace vflow
{
    namespace
    {
        void require_finite_nonneg(double v, const char *name)
        {
            if (!std::isfinite(v) || v < 0.0)
                throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and >= 0");
        }

        Mat gather(const Mat &H, std::span<const int> states)
        {
            Mat out(H.rows(), static_cast<Eigen::Index>(states.size()));
            for (std::size_t j = 0; j < states.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = H.col(states[j]);
            return out;
        }

        void scatter_add(Mat &dH, const Mat &cols, std::span<const int> states)
        {
            for (std::size_t j = 0; j < states.size(); ++j) dH.col(states[j]) += cols.col(static_cast<Eigen::Index>(j));
        }

        std::vector<int> states_of(std::span<const FlowSample> batch)
        {
            std::vector<int> s;
            s.reserve(batch.size());
            for (const auto &b : batch) s.push_back(b.state);
            return s;
        }

        // Forward the model on (z, t, H[states]), run `core` to get dL/dv, then backward.
        template <class Core>
        LossGrad run_velocity_loss(const FlowModel &model, const Mat &H, const Vec &z, const Vec &t,
                                   std::span<const int> states, Core &&core)
        {
            LossGrad out;
            out.grads = model.zero_grads();
            out.dH = Mat::Zero(H.rows(), H.cols());
            if (z.size() == 0) return out;
            const Mat Hq = gather(H, states);
            FieldTape tape;
            const Vec v = model.velocity(z, t, Hq, &tape);
            VelocityLoss vl = core(v);
            out.value = vl.value;
            Mat dHq;
            model.velocity_backward(tape, vl.dv, &out.grads, nullptr, &dHq);
            scatter_add(out.dH, dHq, states);
            return out;
        }
    }

    void LossWeights::validate() const
    {
        require_finite_nonneg(reg, "reg");
        require_finite_nonneg(cons, "cons");
        require_finite_nonneg(risk, "risk");
        require_finite_nonneg(shape, "shape");
    }

    TailSpec::TailSpec(double alpha, double beta, int K) : alpha(alpha), beta(beta), K(K)
    {
        if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("TailSpec: alpha must lie in (0, 1)");
        if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("TailSpec: beta must lie in (0, 1)");
        if (K < 2) throw std::invalid_argument("TailSpec: K must be >= 2");
    }

    int TailSpec::k_alpha() const
    {
        const int k = static_cast<int>(std::floor(alpha * K + 1e-9));
        return std::clamp(k, 1, K);
    }

    int TailSpec::k_beta() const
    {
        const int k = static_cast<int>(std::floor((1.0 - beta) * K + 1e-9));
        return std::clamp(k, 1, K);
    }

    double total_loss(const LossBreakdown &c, const LossWeights &w)
    {
        return c.udcfm + w.reg * c.bcfm + w.cons * c.cons + w.risk * c.risk + w.shape * c.shape;
    }

    PathPoint flow_path(double x0, double x1, double t) { return {t * x1 + (1.0 - t) * x0, x1 - x0}; }

    double draw_target(const QuantileDistribution &target, double x0, Coupling coupling, Rng &rng)
    {
        const int K = target.size();
        if (K == 0) throw std::invalid_argument("draw_target: empty target");
        if (coupling == Coupling::independent) return target[static_cast<int>(rng.index(static_cast<std::size_t>(K)))];
        const double u = 0.5 * std::erfc(-x0 / std::sqrt(2.0));
        const int k = std::clamp(static_cast<int>(std::floor(u * K)), 0, K - 1);
        return target[k];
    }

    VelocityLoss weighted_cfm(const Vec &v, const Vec &u, const Vec &w)
    {
        if (v.size() != u.size() || v.size() != w.size()) throw std::invalid_argument("weighted_cfm: size mismatch");
        VelocityLoss out;
        out.dv = Vec::Zero(v.size());
        if (v.size() == 0) return out;
        const double n = static_cast<double>(v.size());
        const Vec r = v - u;
        out.value = (w.array() * r.array().square()).sum() / n;
        out.dv = (2.0 / n) * w.cwiseProduct(r);
        return out;
    }

    PairLoss consistency_core(const Vec &t, const Vec &z_a, const Vec &v_a, const Vec &z_b, const Vec &v_b)
    {
        const Eigen::Index B = t.size();
        if (z_a.size() != B || v_a.size() != B || z_b.size() != B || v_b.size() != B)
            throw std::invalid_argument("consistency_core: size mismatch");
        PairLoss out;
        out.dv_a = Vec::Zero(B);
        out.dv_b = Vec::Zero(B);
        if (B == 0) return out;
        const double n = static_cast<double>(B);
        for (Eigen::Index i = 0; i < B; ++i) {
            const double xa = z_a[i] + (1.0 - t[i]) * v_a[i];
            const double xb = z_b[i] + t[i] * v_b[i];  // 1 - t' = t
            const double gap = xa - xb;
            out.value += gap * gap / n;
            out.dv_a[i] = 2.0 * gap * (1.0 - t[i]) / n;
            out.dv_b[i] = -2.0 * gap * t[i] / n;
        }
        return out;
    }

    TailLoss risk_loss(const QuantileDistribution &pred, const QuantileDistribution &tgt, const TailSpec &spec)
    {
        const int K = pred.size();
        if (tgt.size() != K || spec.K != K) throw std::invalid_argument("risk_loss: length mismatch");
        TailLoss out;
        out.grad = Vec::Zero(K);
        const int ka = spec.k_alpha();
        double left = 0.0;
        for (int i = 0; i < ka; ++i) left += pred[i] - tgt[i];
        left /= ka;
        const int kb = spec.k_beta();
        const int right_n = K - kb + 1;
        double right = 0.0;
        for (int i = kb - 1; i < K; ++i) right += pred[i] - tgt[i];
        right /= right_n;
        out.value = left * left + right * right;
        for (int i = 0; i < ka; ++i) out.grad[i] += 2.0 * left / ka;
        for (int i = kb - 1; i < K; ++i) out.grad[i] += 2.0 * right / right_n;
        return out;
    }

    TailLoss shape_loss(const QuantileDistribution &pred, const TailSpec &spec)
    {
        const int K = pred.size();
        if (spec.K != K) throw std::invalid_argument("shape_loss: length mismatch");
        TailLoss out;
        out.grad = Vec::Zero(K);
        auto second_diff = [&](int i) { return pred[i + 2] - 2.0 * pred[i + 1] + pred[i]; };
        auto add_grad = [&](int i, double g) {
            out.grad[i] += g;
            out.grad[i + 1] -= 2.0 * g;
            out.grad[i + 2] += g;
        };
        // Left tail should be concave: penalize positive curvature.
        const int nl = spec.left_shape_count();
        for (int i = 0; i < nl; ++i) {
            const double d = second_diff(i);
            if (d > 0.0) {
                out.value += d / nl;
                add_grad(i, 1.0 / nl);
            }
        }
        // Right tail should be convex: penalize negative curvature.
        const int nr = spec.right_shape_count();
        const int start = spec.k_beta() - 1;
        for (int i = start; i < start + nr; ++i) {
            const double d = second_diff(i);
            if (d < 0.0) {
                out.value += -d / nr;
                add_grad(i, -1.0 / nr);
            }
        }
        return out;
    }

    LossGrad udcfm_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch,
                        std::span<const double> w_conf)
    {
        const auto B = static_cast<Eigen::Index>(batch.size());
        Vec z(B), t(B), u(B), w(B);
        for (Eigen::Index i = 0; i < B; ++i) {
            const auto &s = batch[static_cast<std::size_t>(i)];
            const PathPoint p = flow_path(s.x0, s.x1, s.t);
            z[i] = p.z;
            t[i] = s.t;
            u[i] = p.u;
            w[i] = w_conf[static_cast<std::size_t>(s.state)];
        }
        const auto states = states_of(batch);
        return run_velocity_loss(model, H, z, t, states, [&](const Vec &v) { return weighted_cfm(v, u, w); });
    }

    LossGrad bcfm_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch,
                       std::span<const double> anchor, std::span<const double> w_conf)
    {
        const auto B = static_cast<Eigen::Index>(batch.size());
        Vec z(B), t(B), u(B), w(B);
        for (Eigen::Index i = 0; i < B; ++i) {
            const auto &s = batch[static_cast<std::size_t>(i)];
            const double x1 = anchor[static_cast<std::size_t>(s.state)];
            const PathPoint p = flow_path(s.x0, x1, s.t);
            z[i] = p.z;
            t[i] = s.t;
            u[i] = p.u;
            w[i] = w_conf[static_cast<std::size_t>(s.state)];
        }
        const auto states = states_of(batch);
        return run_velocity_loss(model, H, z, t, states, [&](const Vec &v) { return weighted_cfm(v, u, w); });
    }

    LossGrad consistency_loss(const FlowModel &model, const Mat &H, std::span<const FlowSample> batch)
    {
        const auto B = static_cast<Eigen::Index>(batch.size());
        // Stack side a (time t) over side b (time 1 - t) in one forward pass.
        Vec z(2 * B), t(2 * B), tt(B), za(B), zb(B);
        std::vector<int> states(static_cast<std::size_t>(2 * B));
        for (Eigen::Index i = 0; i < B; ++i) {
            const auto &s = batch[static_cast<std::size_t>(i)];
            za[i] = flow_path(s.x0, s.x1, s.t).z;
            zb[i] = flow_path(s.x0, s.x1, 1.0 - s.t).z;
            tt[i] = s.t;
            z[i] = za[i];
            z[B + i] = zb[i];
            t[i] = s.t;
            t[B + i] = 1.0 - s.t;
            states[static_cast<std::size_t>(i)] = s.state;
            states[static_cast<std::size_t>(B + i)] = s.state;
        }
        return run_velocity_loss(model, H, z, t, states, [&](const Vec &v) {
            const PairLoss pl = consistency_core(tt, za, v.head(B), zb, v.tail(B));
            VelocityLoss out;
            out.value = pl.value;
            out.dv.resize(2 * B);
            out.dv << pl.dv_a, pl.dv_b;
            return out;
        });
    }

    Vec anchor_targets(const std::vector<QuantileDistribution> &predictions)
    {
        Vec out(static_cast<Eigen::Index>(predictions.size()));
        for (std::size_t i = 0; i < predictions.size(); ++i) out[static_cast<Eigen::Index>(i)] = predictions[i].mean();
        return out;
    }

    TailLossGrad tail_losses(const FlowModel &model, const Mat &H, const TailBatch &batch, const TailSpec &spec,
                             int steps, double risk_coef, double shape_coef)
    {
        const auto S = static_cast<Eigen::Index>(batch.states.size());
        const Eigen::Index K = batch.noise.rows();
        if (batch.noise.cols() != S || batch.targets.size() != batch.states.size())
            throw std::invalid_argument("tail_losses: batch shape mismatch");
        if (K != spec.K) throw std::invalid_argument("tail_losses: particle count differs from TailSpec K");
        TailLossGrad out;
        out.grads = model.zero_grads();
        out.dH = Mat::Zero(H.rows(), H.cols());
        if (S == 0) return out;

        std::vector<int> cols(static_cast<std::size_t>(S * K));
        for (Eigen::Index s = 0; s < S; ++s)
            for (Eigen::Index k = 0; k < K; ++k) cols[static_cast<std::size_t>(s * K + k)] = batch.states[static_cast<std::size_t>(s)];
        const Mat Hq = gather(H, cols);
        const Vec z0 = batch.noise.reshaped();
        IvpTape tape;
        const Vec z1 = solve_ivp_taped(model, z0, Hq, steps, tape);

        Vec dz1 = Vec::Zero(z1.size());
        const double inv_s = 1.0 / static_cast<double>(S);
        for (Eigen::Index s = 0; s < S; ++s) {
            const Vec particles = z1.segment(s * K, K);
            const auto order = stable_argsort(particles);
            auto pred = QuantileDistribution::from_unsorted(particles);
            const auto &tgt = batch.targets[static_cast<std::size_t>(s)];
            const TailLoss r = risk_loss(pred, tgt, spec);
            const TailLoss sh = shape_loss(pred, spec);
            out.risk += r.value * inv_s;
            out.shape += sh.value * inv_s;
            const Vec g = (risk_coef * r.grad + shape_coef * sh.grad) * inv_s;
            for (Eigen::Index k = 0; k < K; ++k) dz1[s * K + order[static_cast<std::size_t>(k)]] = g[k];
            out.predictions.push_back(std::move(pred));
        }
        Mat dHq;
        solve_ivp_backward(model, tape, dz1, &out.grads, &dHq, nullptr);
        scatter_add(out.dH, dHq, cols);
        return out;
    }
}
