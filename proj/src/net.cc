#include "vflow/net.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace vflow
{
    namespace
    {
        // tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2); beyond x = 20 it is 1 to double precision.
        template <class A>
        auto mish_parts(const A &x)
        {
            const auto e = x.min(20.0).exp().eval();
            const auto n = (e * (e + 2.0)).eval();
            return std::pair{e, n};
        }

        void activate(Activation act, const Mat &pre, Mat &out)
        {
            switch (act) {
                case Activation::identity: out = pre; break;
                case Activation::mish: {
                    const auto [e, n] = mish_parts(pre.array());
                    out = (pre.array() * n / (n + 2.0)).matrix();
                    break;
                }
                case Activation::tanh: out = pre.array().tanh().matrix(); break;
            }
        }

        // Chain rule through the activation, in place on `grad`.
        void activation_backward(Activation act, const Mat &pre, Mat &grad)
        {
            switch (act) {
                case Activation::identity: break;
                case Activation::mish: {
                    const auto x = pre.array();
                    const auto [e, n] = mish_parts(x);
                    const auto d = (n + 2.0).eval();
                    grad.array() *= n / d + x * 4.0 * (n + 1.0) / d.square() * e / (1.0 + e);
                    break;
                }
                case Activation::tanh:
                    grad.array() *= 1.0 - pre.array().tanh().square();
                    break;
            }
        }
    }

    double mish(double x)
    {
        const double e = std::exp(std::min(x, 20.0));
        const double n = e * (e + 2.0);
        return x * n / (n + 2.0);
    }

    double mish_grad(double x)
    {
        const double e = std::exp(std::min(x, 20.0));
        const double n = e * (e + 2.0);
        const double d = n + 2.0;
        return n / d + x * 4.0 * (n + 1.0) / (d * d) * e / (1.0 + e);
    }

    Vec mish(const Vec &x) { return x.unaryExpr([](double v) { return mish(v); }); }

    TimeEmbedding::TimeEmbedding(int dim, double max_freq) : dim_(dim)
    {
        if (dim <= 0 || dim % 2 != 0)
            throw std::invalid_argument("time embedding dim must be a positive even integer, got " +
                                        std::to_string(dim));
        if (!(max_freq >= 1.0)) throw std::invalid_argument("time embedding max_freq must be >= 1");
        const int half = dim / 2;
        freqs_.resize(half);
        for (int i = 0; i < half; ++i) {
            const double frac = half == 1 ? 0.0 : static_cast<double>(i) / (half - 1);
            freqs_[i] = std::pow(max_freq, frac);
        }
    }

    void TimeEmbedding::embed_into(double t, Eigen::Ref<Vec> out) const
    {
        for (Eigen::Index i = 0; i < freqs_.size(); ++i) {
            out[2 * i] = std::sin(freqs_[i] * t);
            out[2 * i + 1] = std::cos(freqs_[i] * t);
        }
    }

    Vec TimeEmbedding::embed(double t) const
    {
        Vec out(dim_);
        embed_into(t, out);
        return out;
    }

    Vec embed_time(double t, int dim, double max_freq)
    {
        if (t < 0.0 || t > 1.0) throw std::invalid_argument("embed_time: t must lie in [0, 1]");
        return TimeEmbedding(dim, max_freq).embed(t);
    }

    DenseLayer::DenseLayer(int in, int out, bool spectral, std::mt19937_64 &rng)
        : weight(out, in), bias(Vec::Zero(out)), spectral_state(in), spectral_enabled(spectral)
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> uni(-bound, bound);
        for (Eigen::Index j = 0; j < weight.cols(); ++j)
            for (Eigen::Index i = 0; i < weight.rows(); ++i) weight(i, j) = uni(rng);
        std::normal_distribution<double> normal;
        for (Eigen::Index i = 0; i < spectral_state.size(); ++i) spectral_state[i] = normal(rng);
        const double n = spectral_state.norm();
        if (n > 0) spectral_state /= n;
        else spectral_state = Vec::Unit(in, 0);
    }

    double DenseLayer::sigma_hat() const { return (weight * spectral_state).norm(); }

    Mat DenseLayer::effective_weight() const
    {
        if (!spectral_enabled) return weight;
        const double sigma = sigma_hat();
        if (sigma <= 1.0) return weight;
        return weight / sigma;
    }

    void DenseLayer::power_iterate(int iters)
    {
        for (int i = 0; i < iters; ++i) {
            Vec u = weight * spectral_state;
            const double un = u.norm();
            if (un == 0.0) return;
            u /= un;
            Vec v = weight.transpose() * u;
            const double vn = v.norm();
            if (vn == 0.0) return;
            spectral_state = v / vn;
        }
    }

    Mat DenseLayer::raw_weight_grad(const Mat &effective_grad) const
    {
        if (!spectral_enabled) return effective_grad;
        const Vec wv = weight * spectral_state;
        const double sigma = wv.norm();
        if (sigma <= 1.0) return effective_grad;
        const Vec u = wv / sigma;
        const double inner = (effective_grad.array() * weight.array()).sum();
        return effective_grad / sigma - (inner / (sigma * sigma)) * u * spectral_state.transpose();
    }

    Mat spectral_normalize(DenseLayer &layer, int iters)
    {
        if (iters < 1) throw std::invalid_argument("spectral_normalize: iters must be >= 1");
        layer.power_iterate(iters);
        const double sigma = layer.sigma_hat();
        if (sigma <= 1.0) return layer.weight;
        return layer.weight / sigma;
    }

    void MlpGrads::set_zero()
    {
        for (auto &g : layers) {
            g.weight.setZero();
            g.bias.setZero();
        }
    }

    MlpGrads &MlpGrads::operator+=(const MlpGrads &other)
    {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].weight += other.layers[i].weight;
            layers[i].bias += other.layers[i].bias;
        }
        return *this;
    }

    MlpGrads &MlpGrads::operator*=(double s)
    {
        for (auto &g : layers) {
            g.weight *= s;
            g.bias *= s;
        }
        return *this;
    }

    bool MlpGrads::all_finite() const
    {
        for (const auto &g : layers)
            if (!g.weight.allFinite() || !g.bias.allFinite()) return false;
        return true;
    }

    Mlp::Mlp(std::span<const int> sizes, Activation hidden, Activation output, bool spectral,
             std::mt19937_64 &rng)
        : hidden_act(hidden), output_act(output)
    {
        if (sizes.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            if (sizes[i] <= 0 || sizes[i + 1] <= 0) throw std::invalid_argument("Mlp layer sizes must be positive");
            layers.emplace_back(sizes[i], sizes[i + 1], spectral, rng);
        }
    }

    Mat Mlp::forward(const Mat &x) const
    {
        MlpTape tape;
        return forward(x, tape);
    }

    Mat Mlp::forward(const Mat &x, MlpTape &tape) const
    {
        if (x.rows() != in_dim())
            throw std::invalid_argument("Mlp::forward: input has " + std::to_string(x.rows()) +
                                        " rows, expected " + std::to_string(in_dim()));
        const std::size_t n = layers.size();
        tape.inputs.resize(n);
        tape.preacts.resize(n);
        tape.weights.resize(n);
        Mat h = x;
        for (std::size_t i = 0; i < n; ++i) {
            tape.weights[i] = layers[i].effective_weight();
            tape.inputs[i] = std::move(h);
            tape.preacts[i] = tape.weights[i] * tape.inputs[i];
            tape.preacts[i].colwise() += layers[i].bias;
            activate(i + 1 == n ? output_act : hidden_act, tape.preacts[i], h);
        }
        tape.output = h;
        return h;
    }

    Mat Mlp::backward(const MlpTape &tape, const Mat &upstream, MlpGrads *grads) const
    {
        const std::size_t n = layers.size();
        if (tape.inputs.size() != n || upstream.rows() != out_dim() || upstream.cols() != tape.output.cols())
            throw std::invalid_argument("Mlp::backward: upstream gradient shape mismatch");
        Mat g = upstream;
        for (std::size_t k = n; k-- > 0;) {
            activation_backward(k + 1 == n ? output_act : hidden_act, tape.preacts[k], g);
            if (grads) {
                const Mat weff_grad = g * tape.inputs[k].transpose();
                grads->layers[k].weight += layers[k].raw_weight_grad(weff_grad);
                grads->layers[k].bias += g.rowwise().sum();
            }
            g = tape.weights[k].transpose() * g;
        }
        return g;
    }

    MlpGrads Mlp::zero_grads() const
    {
        MlpGrads g;
        g.layers.reserve(layers.size());
        for (const auto &l : layers) g.layers.push_back({Mat::Zero(l.out_dim(), l.in_dim()), Vec::Zero(l.out_dim())});
        return g;
    }

    void Mlp::power_iterate(int iters)
    {
        for (auto &l : layers)
            if (l.spectral_enabled) l.power_iterate(iters);
    }

    std::size_t Mlp::param_count() const
    {
        std::size_t n = 0;
        for (const auto &l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }

    ForwardBackward forward_backward(const Mlp &net, const Mat &inputs, const Mat &upstream)
    {
        if (inputs.rows() != net.in_dim() || upstream.rows() != net.out_dim() || upstream.cols() != inputs.cols())
            throw std::invalid_argument("forward_backward: shape mismatch");
        ForwardBackward out;
        MlpTape tape;
        out.outputs = net.forward(inputs, tape);
        out.grads = net.zero_grads();
        out.input_grad = net.backward(tape, upstream, &out.grads);
        return out;
    }

    Vec flatten_params(const Mlp &net)
    {
        Vec flat(static_cast<Eigen::Index>(net.param_count()));
        Eigen::Index off = 0;
        for (const auto &l : net.layers) {
            flat.segment(off, l.weight.size()) = l.weight.reshaped();
            off += l.weight.size();
            flat.segment(off, l.bias.size()) = l.bias;
            off += l.bias.size();
        }
        return flat;
    }

    void unflatten_params(Mlp &net, const Vec &flat, std::size_t offset)
    {
        auto off = static_cast<Eigen::Index>(offset);
        for (auto &l : net.layers) {
            l.weight.reshaped() = flat.segment(off, l.weight.size());
            off += l.weight.size();
            l.bias = flat.segment(off, l.bias.size());
            off += l.bias.size();
        }
    }

    Vec flatten_grads(const MlpGrads &grads)
    {
        Eigen::Index n = 0;
        for (const auto &g : grads.layers) n += g.weight.size() + g.bias.size();
        Vec flat(n);
        Eigen::Index off = 0;
        for (const auto &g : grads.layers) {
            flat.segment(off, g.weight.size()) = g.weight.reshaped();
            off += g.weight.size();
            flat.segment(off, g.bias.size()) = g.bias;
            off += g.bias.size();
        }
        return flat;
    }
}
