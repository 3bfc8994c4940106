#include "vflow/verify.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <Eigen/SVD>

#include "vflow/trainer.h"

namespace vflow
{
    namespace
    {
        Vec random_vec(Eigen::Index n, Rng &rng, double scale = 1.0)
        {
            Vec v(n);
            for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
            return v;
        }

        Mat random_mat(Eigen::Index r, Eigen::Index c, Rng &rng, double scale = 1.0)
        {
            Mat m(r, c);
            for (Eigen::Index j = 0; j < c; ++j)
                for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
            return m;
        }

        std::uint64_t instance_seed(std::uint64_t seed, std::uint64_t suite, int i)
        {
            return Rng::derive(seed * 1000003ULL + suite, static_cast<std::uint64_t>(i)).engine()();
        }

        /// Small head with spectral normalization engaged (weights inflated so σ̂ > 1).
        FlowModel small_model(Rng &rng, bool spectral)
        {
            FlowShape s;
            s.obs_dim = 3;
            s.state_dim = 3;
            s.encoder_hidden = 5;
            s.time_dim = 4;
            s.time_hidden = 4;
            s.field_hidden = 8;
            s.field_depth = 2;
            s.time_max_freq = 10.0;
            s.spectral = spectral;
            FlowModel m(s, rng.engine()());
            if (spectral) {
                for (DenseLayer &l : m.field.layers) l.weight *= 2.5;
                m.power_iterate(3);
            }
            return m;
        }

        double model_loss_fd(FlowModel model, const Vec &analytic, const std::function<double(const FlowModel &)> &loss)
        {
            const Vec p0 = model.flat_params();
            return finite_difference_check(p0, analytic, [&](const Vec &p) {
                model.set_flat_params(p);
                return loss(model);
            });
        }

        SuiteResult gradient_result(std::string name, double worst, int n)
        {
            SuiteResult r;
            r.name = std::move(name);
            r.measured = worst;
            r.threshold = 1e-4;
            r.pass = worst < 1e-4;
            r.instances = n;
            r.detail = "max relative error vs central differences";
            return r;
        }

        struct LinearField
        {
            double a;
            Vec velocity(const Vec &z, double) const { return a * z; }
            Vec velocity_dz(const Vec &z, double) const { return Vec::Constant(z.size(), a); }
        };

        /// Velocity of the straight transport x0 -> T(x0) with T(x) = x + 2 tanh(x), expressed at (z, t).
        struct StraightField
        {
            static double map(double x) { return x + 2.0 * std::tanh(x); }
            static double source(double z, double t)
            {
                double x = z;
                for (int i = 0; i < 60; ++i) {
                    const double th = std::tanh(x);
                    const double f = x + 2.0 * t * th - z;
                    const double df = 1.0 + 2.0 * t * (1.0 - th * th);
                    x -= f / df;
                }
                return x;
            }
            Vec velocity(const Vec &z, double t) const
            {
                Vec v(z.size());
                for (Eigen::Index i = 0; i < z.size(); ++i) {
                    const double x0 = source(z[i], t);
                    v[i] = map(x0) - x0;
                }
                return v;
            }
        };

        struct CurvedField
        {
            Vec velocity(const Vec &z, double t) const { return Vec::Constant(z.size(), t * t); }
        };

        /// Consistency loss of `field` on interpolations between x0 and its 50-step Euler endpoint, and
        /// the worst velocity drift along those trajectories.
        template <class Field>
        std::pair<double, double> straightness_stats(const Field &field, Rng &rng, int n)
        {
            const Vec x0 = random_vec(n, rng);
            FlowRecorder rec;
            const Vec x1 = solve_ivp(field, x0, 50, &rec);
            Vec t(n), za(n), zb(n), va(n), vb(n);
            for (int i = 0; i < n; ++i) {
                t[i] = rng.uniform();
                za[i] = t[i] * x1[i] + (1.0 - t[i]) * x0[i];
                zb[i] = (1.0 - t[i]) * x1[i] + t[i] * x0[i];
                va[i] = field.velocity(Vec::Constant(1, za[i]), t[i])[0];
                vb[i] = field.velocity(Vec::Constant(1, zb[i]), 1.0 - t[i])[0];
            }
            const double cons = consistency_core(t, za, va, zb, vb).value;
            const Vec v0 = field.velocity(x0, 0.0);
            double drift = 0.0;
            for (const FlowRecord &r : rec) drift = std::max(drift, std::abs(r.v - v0[r.particle]));
            return {cons, drift};
        }
    }

    double gradient_rel_error(double analytic, double numeric)
    {
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        return std::abs(analytic - numeric) / scale;
    }

    double finite_difference_check(const Vec &x, const Vec &analytic, const std::function<double(const Vec &)> &f,
                                   double step)
    {
        if (x.size() != analytic.size()) throw std::invalid_argument("finite_difference_check: size mismatch");
        double worst = 0.0;
        Vec p = x;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            p[i] = x[i] + step;
            const double up = f(p);
            p[i] = x[i] - step;
            const double down = f(p);
            p[i] = x[i];
            const double err = gradient_rel_error(analytic[i], (up - down) / (2.0 * step));
            if (!std::isfinite(err)) return std::numeric_limits<double>::infinity();
            worst = std::max(worst, err);
        }
        return worst;
    }

    SuiteResult suite_net_gradients(const VerifyOptions &opt)
    {
        double worst = 0.0;
        const Activation acts[] = {Activation::identity, Activation::mish, Activation::tanh};
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 1, i));
            const int depth = 1 + static_cast<int>(rng.index(3));
            std::vector<int> sizes{1 + static_cast<int>(rng.index(6))};
            for (int d = 0; d < depth; ++d) sizes.push_back(1 + static_cast<int>(rng.index(d + 1 == depth ? 4 : 16)));
            const bool spectral = i % 2 == 1;
            Mlp net(sizes, acts[rng.index(3)], acts[rng.index(3)], spectral, rng.engine());
            if (spectral) {
                for (DenseLayer &l : net.layers) l.weight *= 3.0;
                net.power_iterate(3);
            }
            const Mat x = random_mat(net.in_dim(), 3, rng);
            const Mat up = random_mat(net.out_dim(), 3, rng);
            const ForwardBackward fb = forward_backward(net, x, up);

            Mlp probe = net;
            worst = std::max(worst, finite_difference_check(flatten_params(net), flatten_grads(fb.grads), [&](const Vec &p) {
                                 unflatten_params(probe, p);
                                 return probe.forward(x).cwiseProduct(up).sum();
                             }));
            worst = std::max(worst, finite_difference_check(x.reshaped(), fb.input_grad.reshaped(), [&](const Vec &xv) {
                                 const Mat xm = xv.reshaped(x.rows(), x.cols());
                                 return net.forward(xm).cwiseProduct(up).sum();
                             }));
        }
        return gradient_result("net-gradients", worst, opt.instances);
    }

    SuiteResult suite_flow_head_gradients(const VerifyOptions &opt)
    {
        double worst = 0.0;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 2, i));
            const FlowModel model = small_model(rng, i % 2 == 0);
            const int B = 4;
            const Vec z = random_vec(B, rng);
            Vec t(B);
            for (int b = 0; b < B; ++b) t[b] = rng.uniform();
            const Mat H = random_mat(model.shape.state_dim, B, rng);
            const Vec dv = random_vec(B, rng);
            FieldTape tape;
            model.velocity(z, t, H, &tape);
            FlowGrads g = model.zero_grads();
            Vec dz;
            Mat dH;
            model.velocity_backward(tape, dv, &g, &dz, &dH);
            worst = std::max(worst, model_loss_fd(model, FlowModel::flatten(g), [&](const FlowModel &m) {
                                 return m.velocity(z, t, H).dot(dv);
                             }));
            worst = std::max(worst, finite_difference_check(z, dz, [&](const Vec &zz) { return model.velocity(zz, t, H).dot(dv); }));
            worst = std::max(worst, finite_difference_check(H.reshaped(), dH.reshaped(), [&](const Vec &h) {
                                 return model.velocity(z, t, h.reshaped(H.rows(), H.cols())).dot(dv);
                             }));
            worst = std::max(worst, finite_difference_check(z, model.velocity_dz(z, t, H), [&](const Vec &zz) {
                                 return model.velocity(zz, t, H).sum();
                             }));
        }
        return gradient_result("flow-head-gradients", worst, opt.instances);
    }

    std::vector<SuiteResult> suite_loss_gradients(const VerifyOptions &opt)
    {
        double w_udcfm = 0, w_bcfm = 0, w_cons = 0, w_risk = 0, w_shape = 0, w_total = 0;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 3, i));
            const FlowModel model = small_model(rng, i % 2 == 0);
            const int S = 4, B = 6, K = 8;
            const Mat H = random_mat(model.shape.state_dim, S, rng);
            std::vector<FlowSample> batch;
            for (int b = 0; b < B; ++b)
                batch.push_back({static_cast<int>(rng.index(S)), rng.normal(), 2.0 * rng.normal(), rng.uniform()});
            std::vector<double> w, anchor;
            for (int s = 0; s < S; ++s) {
                w.push_back(1.0 + 0.5 * rng.uniform());
                anchor.push_back(rng.normal());
            }
            auto check = [&](const LossGrad &lg, const std::function<double(const FlowModel &, const Mat &)> &f) {
                double e = model_loss_fd(model, FlowModel::flatten(lg.grads), [&](const FlowModel &m) { return f(m, H); });
                e = std::max(e, finite_difference_check(H.reshaped(), lg.dH.reshaped(), [&](const Vec &h) {
                                 return f(model, h.reshaped(H.rows(), H.cols()));
                             }));
                return e;
            };
            w_udcfm = std::max(w_udcfm, check(udcfm_loss(model, H, batch, w), [&](const FlowModel &m, const Mat &h) {
                                   return udcfm_loss(m, h, batch, w).value;
                               }));
            w_bcfm = std::max(w_bcfm, check(bcfm_loss(model, H, batch, anchor, w), [&](const FlowModel &m, const Mat &h) {
                                  return bcfm_loss(m, h, batch, anchor, w).value;
                              }));
            w_cons = std::max(w_cons, check(consistency_loss(model, H, batch), [&](const FlowModel &m, const Mat &h) {
                                  return consistency_loss(m, h, batch).value;
                              }));

            const TailSpec spec(0.4, 0.4, K);
            TailBatch tb;
            tb.noise = random_mat(K, S, rng);
            for (int s = 0; s < S; ++s) {
                tb.states.push_back(s);
                tb.targets.push_back(QuantileDistribution::from_unsorted(random_vec(K, rng, 2.0)));
            }
            const int steps = 1 + static_cast<int>(rng.index(3));
            auto tail_check = [&](double rc, double sc) {
                const TailLossGrad tl = tail_losses(model, H, tb, spec, steps, rc, sc);
                auto f = [&](const FlowModel &m, const Mat &h) {
                    const TailLossGrad x = tail_losses(m, h, tb, spec, steps, rc, sc);
                    return rc * x.risk + sc * x.shape;
                };
                double e = model_loss_fd(model, FlowModel::flatten(tl.grads), [&](const FlowModel &m) { return f(m, H); });
                e = std::max(e, finite_difference_check(H.reshaped(), tl.dH.reshaped(), [&](const Vec &h) {
                                 return f(model, h.reshaped(H.rows(), H.cols()));
                             }));
                return e;
            };
            w_risk = std::max(w_risk, tail_check(1.0, 0.0));
            w_shape = std::max(w_shape, tail_check(0.0, 1.0));

            RunConfig cfg;
            cfg.tail = TailSpec(0.4, 0.4, K);
            cfg.tail_states_per_batch = 3;
            cfg.tail_multistep = true;
            cfg.inference_steps = 2;
            CriticData data;
            data.observations = random_mat(model.shape.obs_dim, 5, rng);
            data.w_conf = Vec::Constant(5, 1.2);
            data.anchor = random_vec(5, rng);
            for (int s = 0; s < 5; ++s) data.targets.push_back(QuantileDistribution::from_unsorted(random_vec(K, rng, 2.0)));
            const std::vector<int> idx{0, 2, 3, 4, 2};
            const std::uint64_t draw_seed = rng.engine()();
            Rng r0(draw_seed);
            const CriticStep step = flow_critic_step(model, data, idx, cfg, r0);
            w_total = std::max(w_total, model_loss_fd(model, FlowModel::flatten(step.grads), [&](const FlowModel &m) {
                                    Rng r(draw_seed);
                                    return flow_critic_step(m, data, idx, cfg, r).loss.total;
                                }));
        }
        return {gradient_result("udcfm-gradients", w_udcfm, opt.instances),
                gradient_result("bcfm-gradients", w_bcfm, opt.instances),
                gradient_result("consistency-gradients", w_cons, opt.instances),
                gradient_result("risk-gradients", w_risk, opt.instances),
                gradient_result("shape-gradients", w_shape, opt.instances),
                gradient_result("total-loss-gradients", w_total, opt.instances)};
    }

    std::vector<SuiteResult> suite_policy_gradients(const VerifyOptions &opt)
    {
        double w_policy = 0, w_critic = 0;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 4, i));
            Policy policy(3, 3, 6, rng.engine()());
            const int N = 5;
            PolicyBatch batch;
            batch.observations = random_mat(3, N, rng);
            for (int n = 0; n < N; ++n) {
                const PolicyOutput po = policy.output(batch.observations.col(n));
                const int a = static_cast<int>(rng.index(3));
                batch.actions.push_back(a);
                batch.old_log_probs.push_back(po.log_prob(a) + 0.3 * rng.normal());
                batch.advantages.push_back(rng.normal());
            }
            PolicyUpdateConfig cfg;
            const PolicyObjective obj = policy_objective(policy, batch, cfg);
            Policy probe = policy;
            w_policy = std::max(w_policy, finite_difference_check(flatten_params(policy.net), obj.grad, [&](const Vec &p) {
                                      unflatten_params(probe.net, p);
                                      return policy_objective(probe, batch, cfg).loss;
                                  }));

            ScalarCritic critic(3, 6, rng.engine()());
            const Vec targets = random_vec(N, rng);
            Vec grad;
            critic.loss(batch.observations, targets, &grad);
            ScalarCritic cprobe = critic;
            w_critic = std::max(w_critic, finite_difference_check(flatten_params(critic.net), grad, [&](const Vec &p) {
                                      unflatten_params(cprobe.net, p);
                                      return cprobe.loss(batch.observations, targets, nullptr);
                                  }));
        }
        return {gradient_result("policy-gradients", w_policy, opt.instances),
                gradient_result("scalar-critic-gradients", w_critic, opt.instances)};
    }

    SuiteResult suite_spectral_bound(const VerifyOptions &opt)
    {
        double worst = 0.0;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 5, i));
            DenseLayer layer(1 + static_cast<int>(rng.index(16)), 1 + static_cast<int>(rng.index(16)), true, rng.engine());
            layer.weight = random_mat(layer.out_dim(), layer.in_dim(), rng, 0.2 + 3.0 * rng.uniform());
            const Mat eff = spectral_normalize(layer, 50);
            worst = std::max(worst, Eigen::JacobiSVD<Mat>(eff).singularValues()[0]);
        }
        SuiteResult r;
        r.name = "spectral-bound";
        r.measured = worst;
        r.threshold = 1.0 + 1e-3;
        r.pass = worst <= r.threshold;
        r.instances = opt.instances;
        r.detail = "max true top singular value after 50 power iterations";
        return r;
    }

    SuiteResult suite_contraction(const VerifyOptions &opt, const GaeConfig &gae, int K)
    {
        const double gamma_c = contraction_modulus(gae);
        Rng rng(instance_seed(opt.seed, 6, 0));
        QuantileMdp mdp;
        double worst_ratio = 0.0, worst_excess = -1e300;
        for (int p = 0; p < opt.contraction_pairs; ++p) {
            if (p % 20 == 0) {
                mdp.next.assign(5, 0);
                mdp.reward.assign(5, 0.0);
                for (int s = 0; s < 5; ++s) {
                    // The first MDP is all self-loops, where the bound is attained.
                    mdp.next[static_cast<std::size_t>(s)] = p == 0 ? s : static_cast<int>(rng.index(6)) - 1;
                    mdp.reward[static_cast<std::size_t>(s)] = rng.normal();
                }
            }
            std::vector<QuantileDistribution> z1, z2;
            for (int s = 0; s < 5; ++s) {
                z1.push_back(QuantileDistribution::from_unsorted(random_vec(K, rng, 1.0 + 2.0 * rng.uniform()).array() + rng.normal()));
                if (p % 4 == 0)
                    z2.push_back(QuantileDistribution::from_unsorted(z1.back().supports().array() + 0.7));
                else
                    z2.push_back(QuantileDistribution::from_unsorted(random_vec(K, rng, 1.0 + 2.0 * rng.uniform()).array() + rng.normal()));
            }
            const double before = sup_wasserstein1(z1, z2);
            const double after = sup_wasserstein1(gae_operator(mdp, z1, gae), gae_operator(mdp, z2, gae));
            worst_ratio = std::max(worst_ratio, after / before);
            worst_excess = std::max(worst_excess, after - (gamma_c * before + 1e-9));
        }
        SuiteResult r;
        r.name = "gae-contraction";
        r.measured = worst_ratio;
        r.threshold = gamma_c;
        r.pass = worst_excess <= 0.0;
        r.instances = opt.contraction_pairs;
        std::ostringstream d;
        d << "max W1 ratio vs modulus (5 states, K=" << K << ")";
        r.detail = d.str();
        return r;
    }

    std::vector<SuiteResult> suite_jacobian(const VerifyOptions &opt)
    {
        double worst = 0.0;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 7, i));
            const FlowModel model = small_model(rng, i % 2 == 0);
            const Vec h = random_vec(model.shape.state_dim, rng);
            const double z0 = rng.normal();
            const int steps = 10;
            const SensitivityTrace tr = jacobian_sensitivity(model, z0, h, steps);
            const double eps = 1e-5;
            const double fd = (solve_ivp(model, z0 + eps, h, steps) - solve_ivp(model, z0 - eps, h, steps)) / (2 * eps);
            worst = std::max(worst, std::abs(tr.jacobian.back() - fd) / std::max(std::abs(fd), 1e-12));
        }
        SuiteResult fd;
        fd.name = "jacobian-vs-finite-difference";
        fd.measured = worst;
        fd.threshold = 1e-6;
        fd.pass = worst < 1e-6;
        fd.instances = opt.instances;
        fd.detail = "relative error of J(1), 10 Euler steps";

        double closed = 0.0;
        int count = 0;
        for (double a : {-2.0, -0.5, 0.5, 1.0, 3.0})
            for (int n : {1, 10, 50}) {
                const SensitivityTrace tr = jacobian_sensitivity(LinearField{a}, 1.0, n);
                const double exact = std::pow(1.0 + a / n, n);
                closed = std::max(closed, std::abs(tr.jacobian.back() - exact) / std::max(std::abs(exact), 1e-300));
                ++count;
            }
        SuiteResult cf;
        cf.name = "jacobian-closed-form";
        cf.measured = closed;
        cf.threshold = 1e-12;
        cf.pass = closed < 1e-12;
        cf.instances = count;
        cf.detail = "linear field, J(1) vs (1+a/N)^N";
        return {fd, cf};
    }

    SuiteResult suite_one_step(const VerifyOptions &opt)
    {
        double worst = 0.0;
        bool ok = true;
        for (int i = 0; i < opt.instances; ++i) {
            Rng rng(instance_seed(opt.seed, 8, i));
            const FlowModel model = small_model(rng, i % 2 == 0);
            const ModelField field = bind_state(model, random_vec(model.shape.state_dim, rng), 20);
            const Vec z0 = random_vec(20, rng);
            FlowRecorder rec;
            const Vec z50 = solve_ivp(field, z0, 50, &rec);
            const Vec z1 = solve_ivp(field, z0, 1);
            const Vec v0 = field.velocity(z0, 0.0);
            Vec drift = Vec::Zero(20);
            for (const FlowRecord &r : rec) drift[r.particle] = std::max(drift[r.particle], std::abs(r.v - v0[r.particle]));
            for (int k = 0; k < 20; ++k) {
                const double gap = std::abs(z1[k] - z50[k]);
                if (gap > drift[k] + 1e-12) ok = false;
                if (drift[k] > 0) worst = std::max(worst, gap / drift[k]);
            }
        }
        SuiteResult r;
        r.name = "one-step-exactness";
        r.measured = worst;
        r.threshold = 1.0;
        r.pass = ok;
        r.instances = opt.instances;
        r.detail = "max |1-step - 50-step| / max velocity drift";
        return r;
    }

    SuiteResult suite_straightness(const VerifyOptions &opt)
    {
        Rng rng(instance_seed(opt.seed, 9, 0));
        const auto [cons_s, drift_s] = straightness_stats(StraightField{}, rng, opt.instances);
        const auto [cons_c, drift_c] = straightness_stats(CurvedField{}, rng, opt.instances);
        SuiteResult r;
        r.name = "consistency-straightness";
        r.measured = drift_s;
        r.threshold = 1e-2;
        r.pass = cons_s < 1e-6 && drift_s < 1e-2 && cons_c > 1e-3 && drift_c > 1e-2;
        r.instances = opt.instances;
        std::ostringstream d;
        d.precision(3);
        d << "straight field: cons " << cons_s << ", drift " << drift_s << "; curved field: cons " << cons_c
          << ", drift " << drift_c;
        r.detail = d.str();
        return r;
    }

    std::vector<SuiteResult> run_verify(const RunConfig &cfg, const VerifyOptions &opt)
    {
        std::vector<SuiteResult> out;
        out.push_back(suite_net_gradients(opt));
        out.push_back(suite_flow_head_gradients(opt));
        for (auto &r : suite_loss_gradients(opt)) out.push_back(std::move(r));
        for (auto &r : suite_policy_gradients(opt)) out.push_back(std::move(r));
        out.push_back(suite_spectral_bound(opt));
        out.push_back(suite_contraction(opt, cfg.gae, cfg.tail.K));
        for (auto &r : suite_jacobian(opt)) out.push_back(std::move(r));
        out.push_back(suite_one_step(opt));
        out.push_back(suite_straightness(opt));
        return out;
    }

    std::string format_suite_table(const std::vector<SuiteResult> &results)
    {
        std::ostringstream out;
        char line[256];
        std::snprintf(line, sizeof line, "%-30s %-6s %-13s %-13s %-9s %s\n", "suite", "result", "measured", "threshold",
                      "instances", "detail");
        out << line;
        for (const SuiteResult &r : results) {
            std::snprintf(line, sizeof line, "%-30s %-6s %-13.4e %-13.4e %-9d %s\n", r.name.c_str(),
                          r.pass ? "PASS" : "FAIL", r.measured, r.threshold, r.instances, r.detail.c_str());
            out << line;
        }
        return out.str();
    }
}
