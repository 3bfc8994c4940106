#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.h"
#include "vflow/flow_head.h"

using namespace vflow;

namespace
{
    FlowShape small_shape(bool spectral = true)
    {
        FlowShape s;
        s.obs_dim = 3;
        s.state_dim = 4;
        s.encoder_hidden = 8;
        s.time_dim = 4;
        s.time_hidden = 6;
        s.field_hidden = 10;
        s.field_depth = 2;
        s.spectral = spectral;
        return s;
    }

    /// A model whose head outputs the constant c everywhere.
    FlowModel constant_model(double c)
    {
        FlowModel m(small_shape(), 5);
        m.field.layers.back().weight.setZero();
        m.field.layers.back().bias.setConstant(c);
        return m;
    }

    struct LinearField
    {
        double a;
        Vec velocity(const Vec &z, double) const { return a * z; }
        Vec velocity_dz(const Vec &z, double) const { return Vec::Constant(z.size(), a); }
    };

    struct ConstantField
    {
        double c;
        Vec velocity(const Vec &z, double) const { return Vec::Constant(z.size(), c); }
        Vec velocity_dz(const Vec &z, double) const { return Vec::Zero(z.size()); }
    };

    struct BlowUpField
    {
        Vec velocity(const Vec &z, double t) const { return t < 0.3 ? Vec(z * 1e300) : Vec(z * 1e300 * 1e10); }
        Vec velocity_dz(const Vec &z, double) const { return Vec::Zero(z.size()); }
    };

    Vec random_h(std::uint64_t seed, int n)
    {
        Rng rng(seed);
        Vec h(n);
        for (int i = 0; i < n; ++i) h[i] = rng.normal();
        return h;
    }
}

TEST_SUITE("flow_head")
{
    TEST_CASE("velocity is reproducible and its z-derivative matches finite differences")
    {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            FlowModel m(small_shape(seed % 2 == 0), seed);
            for (auto &l : m.field.layers) l.weight *= 2.0;
            const Vec h = random_h(seed + 100, 4);
            Rng rng(seed);
            const double z = rng.normal(), t = rng.uniform();
            const double v1 = eval_field({z, t, h}, m);
            FlowModel copy(small_shape(seed % 2 == 0), seed);
            for (auto &l : copy.field.layers) l.weight *= 2.0;
            CHECK(v1 == eval_field({z, t, h}, copy));

            const double dz = m.velocity_dz(Vec::Constant(1, z), Vec::Constant(1, t), h)[0];
            const double eps = 1e-5;
            const double fd = (eval_field({z + eps, t, h}, m) - eval_field({z - eps, t, h}, m)) / (2 * eps);
            CHECK(std::abs(dz - fd) / std::max({std::abs(dz), std::abs(fd), 1e-4}) < 1e-4);
        }
    }

    TEST_CASE("velocity parameter and embedding gradients match finite differences")
    {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            FlowModel m(small_shape(true), seed);
            for (auto &l : m.field.layers) l.weight *= 2.5;
            const int B = 3;
            Rng rng(seed + 7);
            Vec z(B), t(B);
            for (int i = 0; i < B; ++i) {
                z[i] = rng.normal();
                t[i] = rng.uniform();
            }
            Mat H = Mat::Random(4, B);
            const Vec up = Vec::Random(B);
            FieldTape tape;
            m.velocity(z, t, H, &tape);
            FlowGrads g = m.zero_grads();
            Mat dH;
            m.velocity_backward(tape, up, &g, nullptr, &dH);

            const Vec theta = m.flat_params();
            auto f = [&](const Vec &p) {
                FlowModel c = m;
                c.set_flat_params(p);
                return c.velocity(z, t, H).dot(up);
            };
            CHECK(oracle::max_rel_error(FlowModel::flatten(g), oracle::central_diff(f, theta)) < 1e-4);

            auto fh = [&](const Vec &hf) { return m.velocity(z, t, hf.reshaped(4, B)).dot(up); };
            const Vec dHflat = dH.reshaped();
            CHECK(oracle::max_rel_error(dHflat, oracle::central_diff(fh, H.reshaped())) < 1e-4);
        }
    }

    TEST_CASE("zeroed head gives zero velocity")
    {
        FlowModel m(small_shape(), 3);
        for (auto &l : m.field.layers) {
            l.weight.setZero();
            l.bias.setZero();
        }
        CHECK(eval_field({0.7, 0.2, random_h(1, 4)}, m) == 0.0);
        CHECK(eval_field({-3.0, 1.0, random_h(2, 4)}, m) == 0.0);
    }

    TEST_CASE("eval_field rejects bad inputs")
    {
        FlowModel m(small_shape(), 3);
        CHECK_THROWS_AS(eval_field({0.0, 1.5, random_h(1, 4)}, m), std::invalid_argument);
        CHECK_THROWS_AS(eval_field({0.0, 0.5, random_h(1, 3)}, m), std::invalid_argument);
    }

    TEST_CASE("solve_ivp on constant and linear fields")
    {
        for (int steps : {1, 2, 7, 50}) {
            const Vec z = solve_ivp(ConstantField{0.75}, Vec::Constant(1, 0.5), steps);
            CHECK(z[0] == doctest::Approx(1.25).epsilon(1e-14));
        }
        const double z50 = solve_ivp(LinearField{0.5}, Vec::Constant(1, 1.0), 50)[0];
        CHECK(z50 == doctest::Approx(std::pow(1.01, 50)).epsilon(1e-13));
        CHECK(z50 == doctest::Approx(1.6446).epsilon(1e-4));
        CHECK(std::abs(z50 - std::exp(0.5)) < 1e-2);

        const FlowModel cm = constant_model(0.3);
        const Vec h = random_h(4, 4);
        CHECK(std::abs(solve_ivp(cm, 0.2, h, 1) - solve_ivp(cm, 0.2, h, 50)) < 1e-6);

        CHECK_THROWS_AS(solve_ivp(LinearField{1.0}, Vec::Ones(1), 0), std::invalid_argument);
    }

    TEST_CASE("one Euler step is z0 plus the velocity at t = 0")
    {
        FlowModel m(small_shape(), 9);
        const Vec h = random_h(3, 4);
        for (double z0 : {-1.2, 0.0, 0.4}) CHECK(solve_ivp(m, z0, h, 1) == z0 + eval_field({z0, 0.0, h}, m));
    }

    TEST_CASE("non-finite state aborts with the step index")
    {
        try {
            solve_ivp(BlowUpField{}, Vec::Constant(1, 1e10), 10);
            FAIL("expected NumericalError");
        } catch (const NumericalError &e) {
            CHECK(e.index >= 0);
            CHECK(e.index < 10);
        }
    }

    TEST_CASE("recording produces steps + 1 points per particle with increasing t")
    {
        FlowRecorder rec;
        solve_ivp(LinearField{0.2}, Vec::LinSpaced(3, -1, 1), 5, &rec);
        CHECK(rec.size() == 3 * 6);
        for (int k = 0; k < 3; ++k) {
            double last = -1;
            int count = 0;
            for (const auto &r : rec)
                if (r.particle == k) {
                    CHECK(r.t > last);
                    last = r.t;
                    ++count;
                }
            CHECK(count == 6);
            CHECK(last == 1.0);
        }
    }

    TEST_CASE("sample_distribution")
    {
        SUBCASE("zero field returns sorted standard normals")
        {
            for (int K : {50, 400, 4000}) {
                Rng rng(K);
                const QuantileDistribution q = sample_distribution(ConstantField{0.0}, K, 1, rng);
                REQUIRE(q.size() == K);
                CHECK(std::is_sorted(q.supports().begin(), q.supports().end()));
                CHECK(std::abs(q.mean()) < 4.0 / std::sqrt(static_cast<double>(K)));
            }
        }
        SUBCASE("K = 50 through a model is length 50 and sorted")
        {
            FlowModel m(small_shape(), 2);
            Rng rng(1);
            const QuantileDistribution q = sample_distribution(m, random_h(5, 4), 50, 1, rng);
            CHECK(q.size() == 50);
            CHECK(std::is_sorted(q.supports().begin(), q.supports().end()));
        }
        SUBCASE("constant field shifts the sorted noise by c")
        {
            const double c = 1.75;
            const FlowModel cm = constant_model(c);
            Rng a(42), b(42);
            const QuantileDistribution q = sample_distribution(cm, random_h(6, 4), 20, 1, a);
            Vec noise(20);
            for (int k = 0; k < 20; ++k) noise[k] = b.normal();
            std::sort(noise.begin(), noise.end());
            for (int k = 0; k < 20; ++k) CHECK(q[k] == noise[k] + c);
        }
        SUBCASE("K < 2 is rejected")
        {
            Rng rng(0);
            CHECK_THROWS_AS(sample_distribution(ConstantField{0.0}, 1, 1, rng), std::invalid_argument);
        }
    }

    TEST_CASE("translation equivariance of the constant flow")
    {
        const Vec z0 = Vec::LinSpaced(9, -2, 2);
        for (double shift : {-1.5, 0.25, 3.0}) {
            const QuantileDistribution a = QuantileDistribution::from_unsorted(solve_ivp(ConstantField{0.4}, z0, 1));
            const QuantileDistribution b =
                QuantileDistribution::from_unsorted(solve_ivp(ConstantField{0.4}, Vec(z0.array() + shift), 1));
            for (int k = 0; k < 9; ++k) CHECK(b[k] == doctest::Approx(a[k] + shift).epsilon(1e-14));
        }
    }

    TEST_CASE("quantile distribution ordering")
    {
        const QuantileDistribution q = QuantileDistribution::from_unsorted((Vec(4) << 3, -1, 2, 0).finished());
        CHECK(q.supports() == (Vec(4) << -1, 0, 2, 3).finished());
        CHECK_THROWS_AS(QuantileDistribution::from_sorted((Vec(3) << 1, 0, 2).finished()), std::invalid_argument);
        CHECK(QuantileDistribution::level(0, 50) == 0.01);
        CHECK(QuantileDistribution::level(49, 50) == 0.99);
    }

    TEST_CASE("sensitivity ODE")
    {
        CHECK(jacobian_sensitivity(ConstantField{0.0}, 0.3, 10).jacobian.back() == 1.0);
        const SensitivityTrace lin = jacobian_sensitivity(LinearField{1.0}, 0.5, 10);
        CHECK(lin.jacobian.front() == 1.0);
        CHECK(lin.jacobian.size() == 11);
        CHECK(lin.jacobian.back() == doctest::Approx(std::pow(1.1, 10)).epsilon(1e-12));
        CHECK(lin.jacobian.back() == doctest::Approx(2.5937).epsilon(1e-4));
        CHECK(lin.final_sq_norm == doctest::Approx(std::pow(1.1, 20)).epsilon(1e-12));

        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            FlowModel m(small_shape(seed % 2 == 1), seed);
            for (auto &l : m.field.layers) l.weight *= 2.0;
            const Vec h = random_h(seed + 50, 4);
            const double z0 = Rng(seed).normal();
            const double J = jacobian_sensitivity(m, z0, h, 10).jacobian.back();
            const double eps = 1e-6;
            const double fd = (solve_ivp(m, z0 + eps, h, 10) - solve_ivp(m, z0 - eps, h, 10)) / (2 * eps);
            CHECK(std::abs(J - fd) / std::abs(fd) < 1e-6);
        }
    }

    TEST_CASE("confidence weight")
    {
        CHECK(confidence_weight(0.0, 1.0) == 1.0);
        CHECK(confidence_weight(1e6, 1.0) == doctest::Approx(1.5).epsilon(1e-12));
        CHECK(confidence_weight(2.0, 2.0) == doctest::Approx(static_cast<double>(oracle::sigmoid(1.0L)) + 0.5).epsilon(1e-14));
        CHECK(confidence_weight(2.0, 2.0) == doctest::Approx(1.2311).epsilon(1e-4));
        CHECK_THROWS_AS(confidence_weight(1.0, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(confidence_weight(1.0, -2.0), std::invalid_argument);

        double prev = confidence_weight(0.0, 0.7);
        for (double x = 0.01; x < 50; x *= 1.3) {
            const double w = confidence_weight(x, 0.7);
            CHECK(w >= prev);
            CHECK(w >= 1.0);
            CHECK(w <= 1.5);
            if (x < 20) CHECK(w > 1.0);
            prev = w;
        }
    }

    TEST_CASE("straight trajectories make one Euler step exact")
    {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            FlowModel m(small_shape(), seed);
            const Vec h = random_h(seed, 4);
            const double z0 = Rng(seed + 1).normal();
            FlowRecorder rec;
            const double z50 = solve_ivp(bind_state(m, h, 1), Vec::Constant(1, z0), 50, &rec)[0];
            double drift = 0.0;
            for (const auto &r : rec)
                if (r.t < 1.0) drift = std::max(drift, std::abs(r.v - rec.front().v));
            CHECK(std::abs(solve_ivp(m, z0, h, 1) - z50) <= drift + 1e-12);
        }
    }
}
