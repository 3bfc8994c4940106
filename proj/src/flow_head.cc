#include "vflow/flow_head.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vflow
{
    std::vector<int> stable_argsort(const Vec &values)
    {
        std::vector<int> idx(static_cast<std::size_t>(values.size()));
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values[a] < values[b]; });
        return idx;
    }

    QuantileDistribution QuantileDistribution::from_unsorted(const Vec &values)
    {
        const auto order = stable_argsort(values);
        QuantileDistribution q;
        q.supports_.resize(values.size());
        for (std::size_t i = 0; i < order.size(); ++i) q.supports_[static_cast<Eigen::Index>(i)] = values[order[i]];
        return q;
    }

    QuantileDistribution QuantileDistribution::from_sorted(const Vec &values)
    {
        for (Eigen::Index i = 1; i < values.size(); ++i)
            if (values[i] < values[i - 1])
                throw std::invalid_argument("QuantileDistribution: supports not sorted at index " + std::to_string(i));
        QuantileDistribution q;
        q.supports_ = values;
        return q;
    }

    void FlowGrads::set_zero()
    {
        encoder.set_zero();
        time_mlp.set_zero();
        field.set_zero();
    }

    FlowGrads &FlowGrads::operator+=(const FlowGrads &other)
    {
        encoder += other.encoder;
        time_mlp += other.time_mlp;
        field += other.field;
        return *this;
    }

    FlowGrads &FlowGrads::operator*=(double s)
    {
        encoder *= s;
        time_mlp *= s;
        field *= s;
        return *this;
    }

    bool FlowGrads::all_finite() const { return encoder.all_finite() && time_mlp.all_finite() && field.all_finite(); }

    FlowModel::FlowModel(const FlowShape &shape, std::uint64_t seed)
        : shape(shape), time_embedding(shape.time_dim, shape.time_max_freq)
    {
        if (shape.field_depth < 1) throw std::invalid_argument("FlowShape: field_depth must be >= 1");
        std::mt19937_64 rng(seed);
        const int enc[] = {shape.obs_dim, shape.encoder_hidden, shape.state_dim};
        encoder = Mlp(enc, Activation::mish, Activation::identity, false, rng);
        const int tm[] = {shape.time_dim, shape.time_hidden, shape.time_hidden};
        time_mlp = Mlp(tm, Activation::mish, Activation::identity, shape.spectral, rng);
        std::vector<int> fs{1 + shape.time_hidden + shape.state_dim};
        for (int i = 0; i < shape.field_depth; ++i) fs.push_back(shape.field_hidden);
        fs.push_back(1);
        field = Mlp(fs, Activation::mish, Activation::identity, shape.spectral, rng);
    }

    Mat FlowModel::encode(const Mat &obs, MlpTape *tape) const
    {
        if (tape) return encoder.forward(obs, *tape);
        return encoder.forward(obs);
    }

    void FlowModel::encode_backward(const MlpTape &tape, const Mat &dH, FlowGrads &grads) const
    {
        encoder.backward(tape, dH, &grads.encoder);
    }

    Vec FlowModel::velocity(const Vec &z, const Vec &t, const Mat &H, FieldTape *tape) const
    {
        const Eigen::Index B = z.size();
        if (t.size() != B || H.cols() != B || H.rows() != shape.state_dim)
            throw std::invalid_argument("FlowModel::velocity: query shape mismatch");
        Mat emb(shape.time_dim, B);
        for (Eigen::Index j = 0; j < B; ++j) time_embedding.embed_into(t[j], emb.col(j));
        FieldTape local;
        FieldTape &tp = tape ? *tape : local;
        const Mat phi = time_mlp.forward(emb, tp.time_mlp);
        tp.time_width = static_cast<int>(phi.rows());
        Mat x(1 + phi.rows() + H.rows(), B);
        x.row(0) = z.transpose();
        x.middleRows(1, phi.rows()) = phi;
        x.bottomRows(H.rows()) = H;
        return field.forward(x, tp.field).row(0).transpose();
    }

    void FlowModel::velocity_backward(const FieldTape &tape, const Vec &dv, FlowGrads *grads, Vec *dz, Mat *dH) const
    {
        const Mat up = dv.transpose();
        const Mat dx = field.backward(tape.field, up, grads ? &grads->field : nullptr);
        if (dz) *dz = dx.row(0).transpose();
        if (dH) *dH = dx.bottomRows(shape.state_dim);
        if (grads) time_mlp.backward(tape.time_mlp, dx.middleRows(1, tape.time_width), &grads->time_mlp);
    }

    Vec FlowModel::velocity_dz(const Vec &z, const Vec &t, const Mat &H) const
    {
        FieldTape tape;
        velocity(z, t, H, &tape);
        Vec dz;
        velocity_backward(tape, Vec::Ones(z.size()), nullptr, &dz, nullptr);
        return dz;
    }

    FlowGrads FlowModel::zero_grads() const { return {encoder.zero_grads(), time_mlp.zero_grads(), field.zero_grads()}; }

    void FlowModel::power_iterate(int iters)
    {
        time_mlp.power_iterate(iters);
        field.power_iterate(iters);
    }

    Vec FlowModel::flat_params() const
    {
        const Vec a = flatten_params(encoder), b = flatten_params(time_mlp), c = flatten_params(field);
        Vec out(a.size() + b.size() + c.size());
        out << a, b, c;
        return out;
    }

    void FlowModel::set_flat_params(const Vec &flat)
    {
        unflatten_params(encoder, flat, 0);
        unflatten_params(time_mlp, flat, encoder.param_count());
        unflatten_params(field, flat, encoder.param_count() + time_mlp.param_count());
    }

    Vec FlowModel::flatten(const FlowGrads &grads)
    {
        const Vec a = flatten_grads(grads.encoder), b = flatten_grads(grads.time_mlp), c = flatten_grads(grads.field);
        Vec out(a.size() + b.size() + c.size());
        out << a, b, c;
        return out;
    }

    double eval_field(const FlowInput &input, const FlowModel &model)
    {
        if (input.t < 0.0 || input.t > 1.0) throw std::invalid_argument("eval_field: t outside [0, 1]");
        if (input.h.size() != model.shape.state_dim) throw std::invalid_argument("eval_field: embedding size mismatch");
        return model.velocity(Vec::Constant(1, input.z), Vec::Constant(1, input.t), input.h)[0];
    }

    Vec ModelField::velocity(const Vec &z, double t) const
    {
        return model.velocity(z, Vec::Constant(z.size(), t), H);
    }

    Vec ModelField::velocity_dz(const Vec &z, double t) const
    {
        return model.velocity_dz(z, Vec::Constant(z.size(), t), H);
    }

    ModelField bind_state(const FlowModel &model, const Vec &h, int particles)
    {
        if (h.size() != model.shape.state_dim) throw std::invalid_argument("bind_state: embedding size mismatch");
        return ModelField{model, h.replicate(1, particles)};
    }

    double solve_ivp(const FlowModel &model, double z0, const Vec &h, int steps)
    {
        return solve_ivp(bind_state(model, h, 1), Vec::Constant(1, z0), steps)[0];
    }

    Vec solve_ivp_taped(const FlowModel &model, const Vec &z0, const Mat &H, int steps, IvpTape &tape)
    {
        if (steps < 1) throw std::invalid_argument("solve_ivp: steps must be >= 1");
        const double dt = 1.0 / steps;
        tape.steps.assign(static_cast<std::size_t>(steps), {});
        Vec z = z0;
        for (int n = 0; n < steps; ++n) {
            z += dt * model.velocity(z, Vec::Constant(z.size(), n * dt), H, &tape.steps[static_cast<std::size_t>(n)]);
            if (!z.allFinite()) throw NumericalError("solve_ivp: non-finite state", n);
        }
        return z;
    }

    void solve_ivp_backward(const FlowModel &model, const IvpTape &tape, const Vec &dz1, FlowGrads *grads, Mat *dH,
                            Vec *dz0)
    {
        const int steps = static_cast<int>(tape.steps.size());
        const double dt = 1.0 / steps;
        Vec g = dz1;
        if (dH) dH->setZero(model.shape.state_dim, dz1.size());
        for (int n = steps; n-- > 0;) {
            Vec dz;
            Mat dh;
            model.velocity_backward(tape.steps[static_cast<std::size_t>(n)], dt * g, grads, &dz, dH ? &dh : nullptr);
            if (dH) *dH += dh;
            g += dz;
        }
        if (dz0) *dz0 = g;
    }

    QuantileDistribution sample_distribution(const FlowModel &model, const Vec &h, int K, int steps, Rng &rng)
    {
        if (K < 2) throw std::invalid_argument("sample_distribution: K must be >= 2");
        return sample_distribution(bind_state(model, h, K), K, steps, rng);
    }

    SensitivityTrace jacobian_sensitivity(const FlowModel &model, double z0, const Vec &h, int steps)
    {
        return jacobian_sensitivity(bind_state(model, h, 1), z0, steps);
    }

    double confidence_weight(double final_sq_norm, double temp)
    {
        if (!(temp > 0.0)) throw std::invalid_argument("confidence_weight: temperature must be > 0");
        const double x = final_sq_norm / temp;
        return 1.0 / (1.0 + std::exp(-x)) + 0.5;
    }

    double confidence_weight(const SensitivityTrace &trace, double temp)
    {
        return confidence_weight(trace.final_sq_norm, temp);
    }
}
