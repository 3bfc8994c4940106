#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace vflow
{
    using Vec = Eigen::VectorXd;
    using Mat = Eigen::MatrixXd;

    double mish(double x);
    /// d/dx of x·tanh(softplus(x)).
    double mish_grad(double x);
    Vec mish(const Vec &x);

    /// Sinusoidal embedding of virtual time, interleaved [sin(w0 t), cos(w0 t), sin(w1 t), ...].
    /// Frequencies form a geometric ladder from 1 to max_freq over dim/2 entries.
    class TimeEmbedding
    {
    public:
        TimeEmbedding() = default;
        TimeEmbedding(int dim, double max_freq = 1e4);

        Vec embed(double t) const;
        void embed_into(double t, Eigen::Ref<Vec> out) const;

        int dim() const { return dim_; }
        const Vec &frequencies() const { return freqs_; }

    private:
        int dim_ = 0;
        Vec freqs_;
    };

    Vec embed_time(double t, int dim, double max_freq = 1e4);

    struct DenseGrads
    {
        Mat weight;
        Vec bias;
    };

    /// Fully connected layer y = W_eff x + b. With spectral normalization on, W_eff = W / max(σ̂, 1)
    /// where σ̂ = ‖W v‖ and v is the persisted power-iteration vector.
    class DenseLayer
    {
    public:
        DenseLayer() = default;
        DenseLayer(int in, int out, bool spectral, std::mt19937_64 &rng);

        int in_dim() const { return static_cast<int>(weight.cols()); }
        int out_dim() const { return static_cast<int>(weight.rows()); }

        /// Current σ̂ for the stored power-iteration state (0 for a zero matrix).
        double sigma_hat() const;
        Mat effective_weight() const;

        /// Runs power iterations, updating spectral_state in place.
        void power_iterate(int iters);

        /// Maps a gradient with respect to the effective weight back onto the raw weight.
        Mat raw_weight_grad(const Mat &effective_grad) const;

        Mat weight;
        Vec bias;
        Vec spectral_state;
        bool spectral_enabled = false;
    };

    /// Power-iterates the layer and returns the effective weight.
    Mat spectral_normalize(DenseLayer &layer, int iters);

    enum class Activation
    {
        identity,
        mish,
        tanh
    };

    struct MlpGrads
    {
        std::vector<DenseGrads> layers;

        void set_zero();
        MlpGrads &operator+=(const MlpGrads &other);
        MlpGrads &operator*=(double s);
        bool all_finite() const;
    };

    /// Activations saved by a forward pass, consumed by backward.
    struct MlpTape
    {
        std::vector<Mat> inputs;
        std::vector<Mat> preacts;
        std::vector<Mat> weights;
        Mat output;
    };

    /// Dense stack; hidden layers use `hidden`, the last layer uses `output`.
    /// Inputs are column batches (in × B).
    class Mlp
    {
    public:
        Mlp() = default;
        Mlp(std::span<const int> sizes, Activation hidden, Activation output, bool spectral,
            std::mt19937_64 &rng);

        int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
        int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

        Mat forward(const Mat &x) const;
        Mat forward(const Mat &x, MlpTape &tape) const;

        /// Reverse-mode pass. Returns the input gradient; accumulates parameter gradients
        /// into `grads` when non-null.
        Mat backward(const MlpTape &tape, const Mat &upstream, MlpGrads *grads) const;

        MlpGrads zero_grads() const;
        void power_iterate(int iters);
        std::size_t param_count() const;

        std::vector<DenseLayer> layers;
        Activation hidden_act = Activation::mish;
        Activation output_act = Activation::identity;
    };

    /// Result of a combined forward/backward call.
    struct ForwardBackward
    {
        Mat outputs;
        MlpGrads grads;
        Mat input_grad;
    };

    ForwardBackward forward_backward(const Mlp &net, const Mat &inputs, const Mat &upstream);

    /// Flat views for optimizers and finite-difference checks. Order: layer by layer, weight
    /// (column-major) then bias.
    Vec flatten_params(const Mlp &net);
    void unflatten_params(Mlp &net, const Vec &flat, std::size_t offset = 0);
    Vec flatten_grads(const MlpGrads &grads);
}
