#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vflow/net.h"
#include "vflow/rng.h"

namespace vflow
{
    /// Raised when an ODE state or loss goes non-finite.
    class NumericalError : public std::runtime_error
    {
    public:
        NumericalError(const std::string &what, long long index)
            : std::runtime_error(what + " (index " + std::to_string(index) + ")"), index(index) {}
        long long index;
    };

    /// Sorted equal-weight quantile supports of a 1-D return distribution.
    class QuantileDistribution
    {
    public:
        QuantileDistribution() = default;

        /// Stable ascending sort of `values`.
        static QuantileDistribution from_unsorted(const Vec &values);
        /// Validates ordering; throws if `values` is not ascending.
        static QuantileDistribution from_sorted(const Vec &values);

        const Vec &supports() const { return supports_; }
        int size() const { return static_cast<int>(supports_.size()); }
        double operator[](int i) const { return supports_[i]; }
        double mean() const { return supports_.mean(); }

        /// Midpoint quantile level (k + 0.5) / K of the k-th support (0-based).
        static double level(int k, int K) { return (k + 0.5) / K; }

    private:
        Vec supports_;
    };

    /// Stable argsort, ascending.
    std::vector<int> stable_argsort(const Vec &values);

    struct FlowShape
    {
        int obs_dim = 1;
        int state_dim = 16;
        int encoder_hidden = 64;
        int time_dim = 16;
        int time_hidden = 32;
        int field_hidden = 128;
        int field_depth = 2;
        double time_max_freq = 1e4;
        bool spectral = true;
    };

    struct FlowGrads
    {
        MlpGrads encoder;
        MlpGrads time_mlp;
        MlpGrads field;

        void set_zero();
        FlowGrads &operator+=(const FlowGrads &other);
        FlowGrads &operator*=(double s);
        bool all_finite() const;
    };

    struct FieldTape
    {
        MlpTape time_mlp;
        MlpTape field;
        int time_width = 0;
    };

    /// Encoder h = E(obs) followed by the value flow head v(z, t, h). The head embeds t with
    /// sinusoids and an MLP, concatenates [z, φ(t), h], and maps it through a spectrally
    /// normalized MLP to a scalar velocity.
    class FlowModel
    {
    public:
        FlowModel() = default;
        FlowModel(const FlowShape &shape, std::uint64_t seed);

        /// Observations are columns (obs_dim × B); returns state_dim × B.
        Mat encode(const Mat &obs, MlpTape *tape = nullptr) const;
        void encode_backward(const MlpTape &tape, const Mat &dH, FlowGrads &grads) const;

        /// One velocity per column. `H` holds the state embedding for each query column.
        Vec velocity(const Vec &z, const Vec &t, const Mat &H, FieldTape *tape = nullptr) const;

        /// Backward through the head. Any of grads/dz/dH may be null.
        void velocity_backward(const FieldTape &tape, const Vec &dv, FlowGrads *grads, Vec *dz, Mat *dH) const;

        /// Exact ∂v/∂z per column.
        Vec velocity_dz(const Vec &z, const Vec &t, const Mat &H) const;

        FlowGrads zero_grads() const;
        void power_iterate(int iters);

        Vec flat_params() const;
        void set_flat_params(const Vec &flat);
        static Vec flatten(const FlowGrads &grads);

        FlowShape shape;
        TimeEmbedding time_embedding;
        Mlp encoder;
        Mlp time_mlp;
        Mlp field;
    };

    struct FlowInput
    {
        double z = 0.0;
        double t = 0.0;
        Vec h;
    };

    double eval_field(const FlowInput &input, const FlowModel &model);

    /// Adapter binding a model to fixed per-particle embeddings (columns of H).
    struct ModelField
    {
        const FlowModel &model;
        Mat H;

        Vec velocity(const Vec &z, double t) const;
        Vec velocity_dz(const Vec &z, double t) const;
    };

    /// Single embedding shared by all particles.
    ModelField bind_state(const FlowModel &model, const Vec &h, int particles);

    /// Appends (particle, t, z, v) rows while integrating.
    struct FlowRecord
    {
        int particle;
        double t;
        double z;
        double v;
    };
    using FlowRecorder = std::vector<FlowRecord>;

    /// Fixed-step Euler from t=0 to t=1 for a batch of particles. When `recorder` is set, one
    /// record per particle per grid point (steps + 1 points including t=0 and t=1).
    template <class Field>
    Vec solve_ivp(const Field &field, const Vec &z0, int steps, FlowRecorder *recorder = nullptr)
    {
        if (steps < 1) throw std::invalid_argument("solve_ivp: steps must be >= 1");
        const double dt = 1.0 / steps;
        Vec z = z0;
        for (int n = 0; n < steps; ++n) {
            const double t = n * dt;
            const Vec v = field.velocity(z, t);
            if (recorder)
                for (Eigen::Index k = 0; k < z.size(); ++k) recorder->push_back({static_cast<int>(k), t, z[k], v[k]});
            z += dt * v;
            if (!z.allFinite()) throw NumericalError("solve_ivp: non-finite state", n);
        }
        if (recorder) {
            const Vec v = field.velocity(z, 1.0);
            for (Eigen::Index k = 0; k < z.size(); ++k) recorder->push_back({static_cast<int>(k), 1.0, z[k], v[k]});
        }
        return z;
    }

    double solve_ivp(const FlowModel &model, double z0, const Vec &h, int steps);

    /// Taped Euler integration for reverse-mode differentiation through the solver.
    struct IvpTape
    {
        std::vector<FieldTape> steps;
    };
    Vec solve_ivp_taped(const FlowModel &model, const Vec &z0, const Mat &H, int steps, IvpTape &tape);
    void solve_ivp_backward(const FlowModel &model, const IvpTape &tape, const Vec &dz1, FlowGrads *grads,
                            Mat *dH, Vec *dz0);

    /// K standard-normal draws pushed through the flow, sorted ascending.
    QuantileDistribution sample_distribution(const FlowModel &model, const Vec &h, int K, int steps, Rng &rng);

    template <class Field>
    QuantileDistribution sample_distribution(const Field &field, int K, int steps, Rng &rng)
    {
        if (K < 2) throw std::invalid_argument("sample_distribution: K must be >= 2");
        Vec z0(K);
        for (int k = 0; k < K; ++k) z0[k] = rng.normal();
        return QuantileDistribution::from_unsorted(solve_ivp(field, z0, steps));
    }

    struct SensitivityTrace
    {
        std::vector<double> jacobian;
        double final_sq_norm = 0.0;
        int steps = 0;
    };

    /// Coupled Euler on (z, J) with J(0) = 1 and dJ/dt = (∂v/∂z) J. Batched over particles;
    /// returns J(1) per particle.
    template <class Field>
    Vec jacobian_final(const Field &field, const Vec &z0, int steps)
    {
        if (steps < 1) throw std::invalid_argument("jacobian_sensitivity: steps must be >= 1");
        const double dt = 1.0 / steps;
        Vec z = z0;
        Vec J = Vec::Ones(z0.size());
        for (int n = 0; n < steps; ++n) {
            const double t = n * dt;
            const Vec dvdz = field.velocity_dz(z, t);
            const Vec v = field.velocity(z, t);
            J += dt * dvdz.cwiseProduct(J);
            z += dt * v;
            if (!J.allFinite() || !z.allFinite()) throw NumericalError("jacobian_sensitivity: non-finite Jacobian", n);
        }
        return J;
    }

    template <class Field>
    SensitivityTrace jacobian_sensitivity(const Field &field, double z0, int steps)
    {
        if (steps < 1) throw std::invalid_argument("jacobian_sensitivity: steps must be >= 1");
        const double dt = 1.0 / steps;
        SensitivityTrace trace;
        trace.steps = steps;
        Vec z = Vec::Constant(1, z0);
        double J = 1.0;
        trace.jacobian.push_back(J);
        for (int n = 0; n < steps; ++n) {
            const double t = n * dt;
            const double dvdz = field.velocity_dz(z, t)[0];
            J += dt * dvdz * J;
            z += dt * field.velocity(z, t);
            if (!std::isfinite(J) || !z.allFinite()) throw NumericalError("jacobian_sensitivity: non-finite Jacobian", n);
            trace.jacobian.push_back(J);
        }
        trace.final_sq_norm = J * J;
        return trace;
    }

    SensitivityTrace jacobian_sensitivity(const FlowModel &model, double z0, const Vec &h, int steps);

    /// σ(‖J(1)‖² / temp) + 0.5, in [1, 1.5).
    double confidence_weight(const SensitivityTrace &trace, double temp);
    double confidence_weight(double final_sq_norm, double temp);
}
