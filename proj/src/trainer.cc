#include "vflow/trainer.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/math/special_functions/erf.hpp>

namespace vflow
{
    namespace
    {
        std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) { return Rng::derive(seed, tag).engine()(); }

        constexpr std::uint64_t tag_flow = 1, tag_policy = 2, tag_scalar = 3, tag_stream = 4, tag_eval = 0x5EED0000;

        std::vector<DenseLayer *> all_layers(FlowModel &m)
        {
            std::vector<DenseLayer *> out;
            for (Mlp *net : {&m.encoder, &m.time_mlp, &m.field})
                for (DenseLayer &l : net->layers) out.push_back(&l);
            return out;
        }

        Vec spectral_states(const FlowModel &m)
        {
            std::vector<double> buf;
            for (DenseLayer *l : all_layers(const_cast<FlowModel &>(m)))
                buf.insert(buf.end(), l->spectral_state.data(), l->spectral_state.data() + l->spectral_state.size());
            return Eigen::Map<Vec>(buf.data(), static_cast<Eigen::Index>(buf.size()));
        }

        void set_spectral_states(FlowModel &m, const Vec &flat)
        {
            Eigen::Index off = 0;
            for (DenseLayer *l : all_layers(m)) {
                const Eigen::Index n = l->spectral_state.size();
                if (off + n > flat.size()) throw std::runtime_error("checkpoint: spectral state size mismatch");
                l->spectral_state = flat.segment(off, n);
                off += n;
            }
            if (off != flat.size()) throw std::runtime_error("checkpoint: spectral state size mismatch");
        }

        void restore(Vec &dst, const Vec &src, const char *name)
        {
            if (dst.size() != src.size()) throw std::runtime_error(std::string("checkpoint: size mismatch for ") + name);
            dst = src;
        }

        std::string opt(const std::optional<double> &x) { return x ? format_real(*x) : std::string(); }
    }

    std::string metrics_header()
    {
        return "iteration,update,udcfm,bcfm,cons,risk,shape,total,mean_w_conf,mean_adv,clean_eval_return,"
               "noisy_train_return,wall_time";
    }

    std::string format_metrics_row(const MetricsRow &r)
    {
        std::ostringstream out;
        out << r.iteration << ",";
        if (r.eval) {
            out << ",,,,,,,,,";
        } else {
            out << r.update << "," << format_real(r.loss.udcfm) << "," << format_real(r.loss.bcfm) << ","
                << format_real(r.loss.cons) << "," << format_real(r.loss.risk) << "," << format_real(r.loss.shape) << ","
                << format_real(r.loss.total) << "," << format_real(r.mean_w_conf) << "," << format_real(r.mean_adv) << ",";
        }
        out << opt(r.clean_eval_return) << "," << format_real(r.noisy_train_return) << "," << format_real(r.wall_time);
        return out.str();
    }

    Vec stratified_normal(int K)
    {
        if (K < 1) throw std::invalid_argument("stratified_normal: K must be >= 1");
        Vec z(K);
        for (int k = 0; k < K; ++k) z[k] = -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * QuantileDistribution::level(k, K));
        return z;
    }

    StatePredictions predict_states(const FlowModel &model, const Mat &observations, int K, int steps,
                                    int jacobian_steps, double tau_temp, Rng &rng)
    {
        const Eigen::Index N = observations.cols();
        std::vector<int> slot(static_cast<std::size_t>(N));
        std::vector<Eigen::Index> unique;
        std::map<std::vector<double>, int> seen;
        for (Eigen::Index i = 0; i < N; ++i) {
            std::vector<double> key(observations.col(i).data(), observations.col(i).data() + observations.rows());
            auto [it, fresh] = seen.emplace(std::move(key), static_cast<int>(unique.size()));
            if (fresh) unique.push_back(i);
            slot[static_cast<std::size_t>(i)] = it->second;
        }
        const auto U = static_cast<Eigen::Index>(unique.size());
        Mat obs_u(observations.rows(), U);
        for (Eigen::Index u = 0; u < U; ++u) obs_u.col(u) = observations.col(unique[static_cast<std::size_t>(u)]);
        const Mat Hu = model.encode(obs_u);

        Mat Hq(Hu.rows(), U * K);
        Vec z0(U * K);
        for (Eigen::Index u = 0; u < U; ++u)
            for (int k = 0; k < K; ++k) {
                Hq.col(u * K + k) = Hu.col(u);
                z0[u * K + k] = rng.normal();
            }
        const Vec z1 = solve_ivp(ModelField{model, std::move(Hq)}, z0, steps);
        const Vec J = jacobian_final(ModelField{model, Hu}, Vec::Zero(U), jacobian_steps);

        std::vector<QuantileDistribution> dists_u;
        for (Eigen::Index u = 0; u < U; ++u) dists_u.push_back(QuantileDistribution::from_unsorted(z1.segment(u * K, K)));

        StatePredictions out;
        out.w_conf.resize(N);
        for (Eigen::Index i = 0; i < N; ++i) {
            const int u = slot[static_cast<std::size_t>(i)];
            out.dists.push_back(dists_u[static_cast<std::size_t>(u)]);
            out.w_conf[i] = confidence_weight(J[u] * J[u], tau_temp);
        }
        return out;
    }

    CriticStep flow_critic_step(const FlowModel &model, const CriticData &data, std::span<const int> idx,
                                const RunConfig &cfg, Rng &rng)
    {
        const auto B = static_cast<Eigen::Index>(idx.size());
        Mat obs(data.observations.rows(), B);
        for (Eigen::Index j = 0; j < B; ++j) obs.col(j) = data.observations.col(idx[static_cast<std::size_t>(j)]);
        MlpTape enc_tape;
        const Mat H = model.encode(obs, &enc_tape);

        std::vector<FlowSample> fm(static_cast<std::size_t>(B)), cons(static_cast<std::size_t>(B));
        std::vector<double> w(static_cast<std::size_t>(B)), anchor(static_cast<std::size_t>(B));
        for (Eigen::Index j = 0; j < B; ++j) {
            const int s = idx[static_cast<std::size_t>(j)];
            const double x0 = rng.normal();
            const double t = rng.uniform();
            const double x1 = draw_target(data.targets[static_cast<std::size_t>(s)], x0, cfg.coupling, rng);
            fm[static_cast<std::size_t>(j)] = {static_cast<int>(j), x0, x1, t};
            w[static_cast<std::size_t>(j)] = data.w_conf[s];
            anchor[static_cast<std::size_t>(j)] = data.anchor[s];
        }
        for (Eigen::Index j = 0; j < B; ++j) {
            const int s = idx[static_cast<std::size_t>(j)];
            const double x0 = rng.normal();
            const double t = rng.uniform();
            const double x1 = draw_target(data.targets[static_cast<std::size_t>(s)], x0, cfg.coupling, rng);
            cons[static_cast<std::size_t>(j)] = {static_cast<int>(j), x0, x1, t};
        }

        const LossGrad u = udcfm_loss(model, H, fm, w);
        const LossGrad b = bcfm_loss(model, H, fm, anchor, w);
        const LossGrad c = consistency_loss(model, H, cons);

        const int K = cfg.tail.K;
        const auto S = std::min<Eigen::Index>(cfg.tail_states_per_batch, B);
        std::vector<int> pos(static_cast<std::size_t>(B));
        std::iota(pos.begin(), pos.end(), 0);
        TailBatch tb;
        tb.noise.resize(K, S);
        for (Eigen::Index s = 0; s < S; ++s) {
            std::swap(pos[static_cast<std::size_t>(s)], pos[static_cast<std::size_t>(s) + rng.index(static_cast<std::size_t>(B - s))]);
            const int p = pos[static_cast<std::size_t>(s)];
            tb.states.push_back(p);
            tb.targets.push_back(data.targets[static_cast<std::size_t>(idx[static_cast<std::size_t>(p)])]);
            for (int k = 0; k < K; ++k) tb.noise(k, s) = rng.normal();
        }
        const TailLossGrad tl = tail_losses(model, H, tb, cfg.tail, cfg.tail_steps(), cfg.weights.risk, cfg.weights.shape);

        CriticStep out;
        out.grads = u.grads;
        FlowGrads tmp = b.grads;
        tmp *= cfg.weights.reg;
        out.grads += tmp;
        tmp = c.grads;
        tmp *= cfg.weights.cons;
        out.grads += tmp;
        out.grads += tl.grads;
        const Mat dH = u.dH + cfg.weights.reg * b.dH + cfg.weights.cons * c.dH + tl.dH;
        model.encode_backward(enc_tape, dH, out.grads);

        out.loss.udcfm = u.value;
        out.loss.bcfm = b.value;
        out.loss.cons = c.value;
        out.loss.risk = tl.risk;
        out.loss.shape = tl.shape;
        out.loss.weights = cfg.weights;
        out.loss.total = total_loss(out.loss, cfg.weights);
        return out;
    }

    Trainer::Trainer(const RunConfig &cfg, std::filesystem::path out_dir)
        : cfg_(cfg), out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now())
    {
        cfg_.validate();
        env_ = make_env(cfg_.env, cfg_.env_params);
        const int obs_dim = env_->obs_dim();
        model_ = FlowModel(cfg_.flow_shape(obs_dim), sub_seed(cfg_.seed, tag_flow));
        policy_ = Policy(obs_dim, env_->num_actions(), cfg_.policy_hidden, sub_seed(cfg_.seed, tag_policy));
        scalar_ = ScalarCritic(obs_dim, cfg_.critic_hidden, sub_seed(cfg_.seed, tag_scalar));
        critic_opt_ = Adam(static_cast<std::size_t>(model_.flat_params().size()), cfg_.critic_adam);
        policy_opt_ = Adam(static_cast<std::size_t>(flatten_params(policy_.net).size()), cfg_.policy_adam);
        scalar_opt_ = Adam(static_cast<std::size_t>(flatten_params(scalar_.net).size()), cfg_.critic_adam);
        rng_ = Rng::derive(cfg_.seed, tag_stream);

        if (!out_dir_.empty()) {
            std::filesystem::create_directories(out_dir_);
            std::ofstream(out_dir_ / "config.txt") << to_text(cfg_);
            const auto path = out_dir_ / "metrics.csv";
            const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
            metrics_ = std::make_unique<std::ofstream>(path, std::ios::app);
            if (!*metrics_) throw std::runtime_error("cannot open " + path.string());
            if (fresh) *metrics_ << metrics_header() << "\n" << std::flush;
        }
    }

    Trainer::~Trainer() = default;

    Trainer Trainer::resume(const std::filesystem::path &checkpoint, std::filesystem::path out_dir)
    {
        const Checkpoint ckpt = read_checkpoint(checkpoint);
        Trainer t(parse_config(ckpt.config_text), std::move(out_dir));
        t.iteration_ = std::stoll(ckpt.meta_value("iteration"));
        t.update_ = std::stoll(ckpt.meta_value("update"));
        t.rng_.set_state(ckpt.meta_value("rng"));

        Vec flow = t.model_.flat_params();
        restore(flow, ckpt.array("flow.params"), "flow.params");
        t.model_.set_flat_params(flow);
        set_spectral_states(t.model_, ckpt.array("flow.spectral"));
        Vec pol = flatten_params(t.policy_.net);
        restore(pol, ckpt.array("policy.params"), "policy.params");
        unflatten_params(t.policy_.net, pol);
        Vec sc = flatten_params(t.scalar_.net);
        restore(sc, ckpt.array("scalar.params"), "scalar.params");
        unflatten_params(t.scalar_.net, sc);

        const std::pair<const char *, Adam *> opts[] = {
            {"critic_adam", &t.critic_opt_}, {"policy_adam", &t.policy_opt_}, {"scalar_adam", &t.scalar_opt_}};
        for (auto [name, adam] : opts) {
            const std::string n(name);
            restore(adam->m, ckpt.array(n + ".m"), name);
            restore(adam->v, ckpt.array(n + ".v"), name);
            adam->steps = std::stoll(ckpt.meta_value(n + ".steps"));
        }
        return t;
    }

    Checkpoint Trainer::snapshot() const
    {
        Checkpoint c;
        c.meta = {{"iteration", std::to_string(iteration_)},
                  {"update", std::to_string(update_)},
                  {"rng", rng_.state()},
                  {"critic_adam.steps", std::to_string(critic_opt_.steps)},
                  {"policy_adam.steps", std::to_string(policy_opt_.steps)},
                  {"scalar_adam.steps", std::to_string(scalar_opt_.steps)}};
        c.config_text = to_text(cfg_);
        c.arrays = {{"flow.params", model_.flat_params()},
                    {"flow.spectral", spectral_states(model_)},
                    {"critic_adam.m", critic_opt_.m},
                    {"critic_adam.v", critic_opt_.v},
                    {"policy.params", flatten_params(policy_.net)},
                    {"policy_adam.m", policy_opt_.m},
                    {"policy_adam.v", policy_opt_.v},
                    {"scalar.params", flatten_params(scalar_.net)},
                    {"scalar_adam.m", scalar_opt_.m},
                    {"scalar_adam.v", scalar_opt_.v}};
        return c;
    }

    void Trainer::save_checkpoint(const std::filesystem::path &path) const { write_checkpoint(path, snapshot()); }

    EvalStats Trainer::evaluate_policy(int episodes, bool ood, std::uint64_t seed) const
    {
        auto env = make_env(cfg_.env, cfg_.env_params);
        env->set_ood(ood);
        const Policy &pol = policy_;
        return evaluate([&pol](const Vec &obs, Rng &rng) { return pol.act(obs, rng); }, *env, episodes,
                        cfg_.gae.gamma, seed);
    }

    double Trainer::elapsed() const
    {
        if (!cfg_.record_wall_time) return 0.0;
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

    void Trainer::emit(MetricsRow row)
    {
        row.wall_time = elapsed();
        if (metrics_) *metrics_ << format_metrics_row(row) << "\n" << std::flush;
        rows_.push_back(std::move(row));
    }

    void Trainer::halt(const std::exception &e)
    {
        if (!out_dir_.empty()) {
            save_checkpoint(out_dir_ / "diagnostic.ckpt");
            std::ofstream(out_dir_ / "diagnostic.txt") << "iteration " << iteration_ << " update " << update_ << ": "
                                                       << e.what() << "\n";
        }
    }

    Trainer::Rollout Trainer::collect()
    {
        Rollout ro;
        std::vector<Vec> cols;
        double total = 0.0;
        for (int e = 0; e < cfg_.episodes_per_iter; ++e) {
            Trajectory tr;
            EnvState s = env_->reset(rng_);
            double ret = 0.0, discount = 1.0;
            while (!s.done) {
                double logp = 0.0;
                const int a = policy_.act(s.observation, rng_, &logp);
                const StepResult r = env_->step(a, rng_);
                const double reward = r.noisy_reward();
                tr.observations.push_back(s.observation);
                tr.actions.push_back(a);
                tr.log_probs.push_back(logp);
                tr.rewards.push_back(reward);
                cols.push_back(s.observation);
                ret += discount * reward;
                discount *= cfg_.gae.gamma;
                s = r.state;
            }
            tr.terminal = s.terminal;
            tr.final_observation = s.observation;
            total += ret;
            ro.trajectories.push_back(std::move(tr));
        }
        ro.noisy_return = total / cfg_.episodes_per_iter;
        ro.observations.resize(env_->obs_dim(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t i = 0; i < cols.size(); ++i) ro.observations.col(static_cast<Eigen::Index>(i)) = cols[i];
        return ro;
    }

    void Trainer::policy_step(const Rollout &ro, const std::vector<double> &advantages)
    {
        PolicyBatch batch;
        batch.observations = ro.observations;
        for (const Trajectory &tr : ro.trajectories) {
            batch.actions.insert(batch.actions.end(), tr.actions.begin(), tr.actions.end());
            batch.old_log_probs.insert(batch.old_log_probs.end(), tr.log_probs.begin(), tr.log_probs.end());
        }
        batch.advantages = advantages;
        policy_update(policy_, policy_opt_, std::move(batch), cfg_.ppo, iteration_);
    }

    void Trainer::flow_iteration(Rollout &ro)
    {
        const Eigen::Index N = ro.observations.cols();
        std::vector<Vec> finals;
        for (const Trajectory &tr : ro.trajectories)
            if (!tr.terminal) finals.push_back(tr.final_observation);
        Mat all(ro.observations.rows(), N + static_cast<Eigen::Index>(finals.size()));
        all.leftCols(N) = ro.observations;
        for (std::size_t i = 0; i < finals.size(); ++i) all.col(N + static_cast<Eigen::Index>(i)) = finals[i];

        const StatePredictions pred =
            predict_states(model_, all, cfg_.tail.K, cfg_.inference_steps, cfg_.jacobian_steps, cfg_.tau_temp, rng_);

        CriticData data;
        data.observations = ro.observations;
        data.w_conf = cfg_.use_wconf ? Vec(pred.w_conf.head(N)) : Vec(Vec::Ones(N));
        data.anchor.resize(N);
        std::vector<double> advantages;
        Eigen::Index row = 0, boot = N;
        for (Trajectory &tr : ro.trajectories) {
            tr.predicted.assign(pred.dists.begin() + row, pred.dists.begin() + row + static_cast<Eigen::Index>(tr.size()));
            if (!tr.terminal) tr.bootstrap = pred.dists[static_cast<std::size_t>(boot++)];
            tr.advantages = dist_gae_backward(tr, cfg_.gae);
            for (std::size_t i = 0; i < tr.size(); ++i) {
                tr.targets.push_back(target_returns(tr.predicted[i], tr.advantages[i]));
                data.targets.push_back(tr.targets.back());
                data.anchor[row] = tr.predicted[i].mean();
                advantages.push_back(scalarize(tr.advantages[i]));
                ++row;
            }
        }
        const double mean_w = data.w_conf.mean();
        const double mean_adv = std::accumulate(advantages.begin(), advantages.end(), 0.0) / static_cast<double>(N);

        std::vector<int> perm(static_cast<std::size_t>(N));
        for (int epoch = 0; epoch < cfg_.critic_epochs; ++epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng_.engine());
            for (Eigen::Index start = 0; start < N; start += cfg_.minibatch_size) {
                const auto len = std::min<Eigen::Index>(cfg_.minibatch_size, N - start);
                const std::span<const int> idx(perm.data() + start, static_cast<std::size_t>(len));
                model_.power_iterate(cfg_.power_iters);
                const CriticStep step = flow_critic_step(model_, data, idx, cfg_, rng_);
                if (!std::isfinite(step.loss.total) || !step.grads.all_finite())
                    throw NumericalError("non-finite critic loss or gradient at update", update_);
                Vec params = model_.flat_params();
                critic_opt_.step(params, FlowModel::flatten(step.grads));
                model_.set_flat_params(params);

                MetricsRow r;
                r.iteration = iteration_;
                r.update = update_++;
                r.loss = step.loss;
                r.mean_w_conf = mean_w;
                r.mean_adv = mean_adv;
                r.noisy_train_return = ro.noisy_return;
                emit(r);
            }
        }
        policy_step(ro, advantages);
    }

    void Trainer::scalar_iteration(Rollout &ro)
    {
        const Eigen::Index N = ro.observations.cols();
        std::vector<double> advantages;
        Vec targets(N);
        Eigen::Index row = 0;
        for (const Trajectory &tr : ro.trajectories) {
            const auto T = static_cast<Eigen::Index>(tr.size());
            const Vec v = scalar_.values(ro.observations.middleCols(row, T));
            const std::vector<double> values(v.data(), v.data() + T);
            const double bootstrap = tr.terminal ? 0.0 : scalar_.value(tr.final_observation);
            const auto adv = scalar_gae(tr.rewards, values, bootstrap, tr.terminal, cfg_.gae);
            for (Eigen::Index i = 0; i < T; ++i) {
                advantages.push_back(adv[static_cast<std::size_t>(i)]);
                targets[row + i] = adv[static_cast<std::size_t>(i)] + values[static_cast<std::size_t>(i)];
            }
            row += T;
        }
        const double mean_adv = std::accumulate(advantages.begin(), advantages.end(), 0.0) / static_cast<double>(N);

        std::vector<int> perm(static_cast<std::size_t>(N));
        for (int epoch = 0; epoch < cfg_.critic_epochs; ++epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng_.engine());
            for (Eigen::Index start = 0; start < N; start += cfg_.minibatch_size) {
                const auto len = std::min<Eigen::Index>(cfg_.minibatch_size, N - start);
                Mat obs(ro.observations.rows(), len);
                Vec tgt(len);
                for (Eigen::Index j = 0; j < len; ++j) {
                    obs.col(j) = ro.observations.col(perm[static_cast<std::size_t>(start + j)]);
                    tgt[j] = targets[perm[static_cast<std::size_t>(start + j)]];
                }
                Vec grad;
                const double mse = scalar_.loss(obs, tgt, &grad);
                if (!std::isfinite(mse) || !grad.allFinite())
                    throw NumericalError("non-finite scalar critic loss at update", update_);
                Vec params = flatten_params(scalar_.net);
                scalar_opt_.step(params, grad);
                unflatten_params(scalar_.net, params);

                MetricsRow r;
                r.iteration = iteration_;
                r.update = update_++;
                r.loss.total = mse;
                r.loss.weights = cfg_.weights;
                r.mean_adv = mean_adv;
                r.noisy_train_return = ro.noisy_return;
                emit(r);
            }
        }
        policy_step(ro, advantages);
    }

    void Trainer::run_iteration()
    {
        double noisy_return = 0.0;
        try {
            Rollout ro = collect();
            noisy_return = ro.noisy_return;
            if (cfg_.critic_mode == CriticMode::flow) flow_iteration(ro);
            else scalar_iteration(ro);
        } catch (const NumericalError &e) {
            halt(e);
            throw;
        }
        if (cfg_.eval_interval > 0 && (iteration_ + 1) % cfg_.eval_interval == 0) {
            const EvalStats stats = evaluate_policy(cfg_.eval_episodes, cfg_.eval_ood,
                                                    sub_seed(cfg_.seed, tag_eval + static_cast<std::uint64_t>(iteration_)));
            MetricsRow r;
            r.iteration = iteration_;
            r.eval = true;
            r.clean_eval_return = stats.mean_return;
            r.noisy_train_return = noisy_return;
            emit(r);
        }
        ++iteration_;
        if (!out_dir_.empty() && cfg_.checkpoint_interval > 0 && iteration_ % cfg_.checkpoint_interval == 0)
            save_checkpoint(out_dir_ / ("checkpoint-" + std::to_string(iteration_) + ".ckpt"));
    }

    void Trainer::run()
    {
        while (iteration_ < cfg_.iterations) run_iteration();
        if (!out_dir_.empty()) save_checkpoint(out_dir_ / "final.ckpt");
    }
}
