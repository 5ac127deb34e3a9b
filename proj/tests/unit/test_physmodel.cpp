#include <doctest.h>

#include <cmath>
#include <random>

#include "nvrelax/error.hpp"
#include "nvrelax/physmodel.hpp"

using namespace nvrelax;
using namespace nvrelax::physmodel;

namespace {

// Independent reference: classical RK4 on the rate equations, state (n0, n1, q0, q1) plus the
// running integrals of n and q.
struct Rk4Result {
    EnsembleState state;
    PoolIntegrals integrals;
};

Rk4Result rk4(const EnsembleState& s0, const RateParams& p, double power, double dt, int steps) {
    using V = std::array<double, 8>;
    const double gi = power > 0 ? p.k_ion * std::pow(power, p.p_ion) : 0.0;
    const double gr = p.k_rec_light * power;
    const double kp = p.k_pol * power;
    auto f = [&](const V& y) {
        V d{};
        for (int i = 0; i < 2; ++i) {
            double n = y[i], q = y[2 + i];
            if (power > 0) {
                d[i] = gr * (1 - n) - gi * n;
                d[2 + i] = kp * p.s_max * n - (kp + 1.0 / p.t1 + gi) * q;
            } else {
                d[i] = (p.n_dark - n) / p.recharge_time(i);
                d[2 + i] = -q / p.t1;
            }
            d[4 + i] = n;
            d[6 + i] = q;
        }
        return d;
    };
    V y{s0.n_minus[0], s0.n_minus[1], s0.q[0], s0.q[1], 0, 0, 0, 0};
    const double h = dt / steps;
    for (int k = 0; k < steps; ++k) {
        V k1 = f(y), y2, y3, y4;
        for (int j = 0; j < 8; ++j) y2[j] = y[j] + 0.5 * h * k1[j];
        V k2 = f(y2);
        for (int j = 0; j < 8; ++j) y3[j] = y[j] + 0.5 * h * k2[j];
        V k3 = f(y3);
        for (int j = 0; j < 8; ++j) y4[j] = y[j] + h * k3[j];
        V k4 = f(y4);
        for (int j = 0; j < 8; ++j) y[j] += h / 6 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
    }
    Rk4Result r;
    r.state.n_minus = {y[0], y[1]};
    r.state.q = {y[2], y[3]};
    r.integrals.n_minus = {y[4], y[5]};
    r.integrals.q = {y[6], y[7]};
    r.integrals.duration = dt;
    return r;
}

RateParams busy_params() {
    RateParams p;
    p.k_ion = 3e9;
    p.p_ion = 1.3;
    p.k_rec_light = 4e8;
    p.k_pol = 5e10;
    p.s_max = 0.65;
    p.n_dark = 0.78;
    p.w1 = 0.3;
    return p;
}

EnsembleState random_state(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    EnsembleState s;
    for (int i = 0; i < kPools; ++i) {
        s.n_minus[i] = u(rng);
        s.q[i] = s.n_minus[i] * u(rng);
    }
    return s;
}

}  // namespace

TEST_CASE("dark evolution") {
    RateParams p;
    EnsembleState s;
    s.n_minus = {0.5, 0.5};
    s.q = {0.3, 0.2};

    SUBCASE("zero interval is the identity") { CHECK(evolve_dark(s, p, 0.0) == s); }

    SUBCASE("long interval reaches the dark equilibrium") {
        auto r = evolve_dark(s, p, 1.0);
        CHECK(r.n_minus[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(r.n_minus[1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(r.q[0]) < 1e-12);
    }

    SUBCASE("one recharge time: 1 - 0.5/e") {
        p.t_r1 = 100e-6;
        auto r = evolve_dark(s, p, 100e-6);
        CHECK(r.n_minus[0] == doctest::Approx(1.0 - 0.5 * std::exp(-1.0)).epsilon(1e-14));
        CHECK(r.n_minus[0] == doctest::Approx(0.8161).epsilon(1e-4));
        auto ref = rk4(s, p, 0.0, 100e-6, 1000);
        CHECK(r.n_minus[0] == doctest::Approx(ref.state.n_minus[0]).epsilon(1e-10));
    }

    SUBCASE("negative interval is rejected") { CHECK_THROWS_AS(evolve_dark(s, p, -1e-6), InvalidArgument); }
}

TEST_CASE("light evolution") {
    RateParams p;

    SUBCASE("zero power equals dark evolution") {
        EnsembleState s;
        s.n_minus = {0.3, 0.6};
        s.q = {0.1, 0.2};
        CHECK(evolve_light(s, p, 0.0, 250e-6) == evolve_dark(s, p, 250e-6));
    }

    SUBCASE("long exposure: n = k_rec / (k_rec + k_ion) = 0.8") {
        p.k_ion = 1e6;
        p.p_ion = 1.0;
        p.k_rec_light = 4e6;
        for (double power : {1e-6, 1e-4, 1e-2}) {
            EnsembleState s;
            s.n_minus = {0.1, 0.9};
            auto r = evolve_light(s, p, power, 1e6 / (5e6 * power));
            CHECK(r.n_minus[0] == doctest::Approx(0.8).epsilon(1e-9));
            CHECK(r.n_minus[1] == doctest::Approx(0.8).epsilon(1e-9));
        }
    }

    SUBCASE("closed form agrees with a fine-step integrator to 1e-6") {
        RateParams q = busy_params();
        std::mt19937_64 rng(11);
        for (double power : {5e-6, 5e-5, 5.4e-4}) {
            for (double dt : {0.5e-6, 5e-6, 200e-6}) {
                auto s = random_state(rng);
                auto ref = rk4(s, q, power, dt, 20000);
                auto prop = Propagator::light(q, power, dt);
                auto r = prop.apply(s);
                auto in = prop.integrate(s);
                for (int i = 0; i < kPools; ++i) {
                    CHECK(std::abs(r.n_minus[i] - ref.state.n_minus[i]) < 1e-6);
                    CHECK(std::abs(r.q[i] - ref.state.q[i]) < 1e-6);
                    CHECK(std::abs(in.n_minus[i] - ref.integrals.n_minus[i]) < 1e-6 * dt);
                    CHECK(std::abs(in.q[i] - ref.integrals.q[i]) < 1e-6 * dt);
                }
            }
        }
        for (double dt : {1e-6, 1e-4, 3e-3}) {
            auto s = random_state(rng);
            auto ref = rk4(s, q, 0.0, dt, 20000);
            auto prop = Propagator::dark(q, dt);
            auto r = prop.apply(s);
            auto in = prop.integrate(s);
            for (int i = 0; i < kPools; ++i) {
                CHECK(std::abs(r.n_minus[i] - ref.state.n_minus[i]) < 1e-6);
                CHECK(std::abs(r.q[i] - ref.state.q[i]) < 1e-6);
                CHECK(std::abs(in.n_minus[i] - ref.integrals.n_minus[i]) < 1e-6 * dt);
            }
        }
    }
}

TEST_CASE("propagator composition is a semigroup") {
    RateParams p = busy_params();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        double power = trial % 3 == 0 ? 0.0 : 1e-6 * std::pow(10.0, 3 * u(rng));
        double a = 1e-7 + 1e-4 * u(rng), b = 1e-7 + 1e-4 * u(rng);
        auto s = random_state(rng);
        auto whole = Propagator::light(p, power, a + b);
        auto split = Propagator::light(p, power, a).then(Propagator::light(p, power, b));
        auto x = whole.apply(s), y = split.apply(s);
        auto ix = whole.integrate(s), iy = split.integrate(s);
        for (int i = 0; i < kPools; ++i) {
            CHECK(std::abs(x.n_minus[i] - y.n_minus[i]) < 1e-12);
            CHECK(std::abs(x.q[i] - y.q[i]) < 1e-12);
            CHECK(std::abs(ix.n_minus[i] - iy.n_minus[i]) < 1e-12 * (a + b));
            CHECK(std::abs(ix.q[i] - iy.q[i]) < 1e-12 * (a + b));
        }
        CHECK(split.duration() == doctest::Approx(a + b));
    }
    SUBCASE("mixed light and dark: composition equals sequential application") {
        auto s = random_state(rng);
        auto l = Propagator::light(p, 1e-4, 3e-6);
        auto d = Propagator::dark(p, 40e-6);
        auto composed = l.then(d).then(l).apply(s);
        auto sequential = l.apply(d.apply(l.apply(s)));
        for (int i = 0; i < kPools; ++i) {
            CHECK(std::abs(composed.n_minus[i] - sequential.n_minus[i]) < 1e-12);
            CHECK(std::abs(composed.q[i] - sequential.q[i]) < 1e-12);
        }
    }
}

TEST_CASE("populations stay in bounds over random operation sequences") {
    RateParams p = busy_params();
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0, 1);
    auto s = EnsembleState::dark_equilibrium(p);
    bool ok = true;
    for (int k = 0; k < 100000; ++k) {
        double r = u(rng);
        if (r < 0.4) {
            s = evolve_light(s, p, 1e-6 * std::pow(10.0, 3.5 * u(rng)), 1e-3 * u(rng) * u(rng));
        } else if (r < 0.8) {
            s = evolve_dark(s, p, 3e-3 * u(rng) * u(rng));
        } else {
            s = apply_pi_pulse(s, p);
        }
        for (int i = 0; i < kPools; ++i) {
            const double tol = 1e-12;
            ok = ok && s.n_minus[i] >= -tol && s.n_minus[i] <= 1 + tol;
            ok = ok && s.q[i] >= -tol && s.q[i] <= s.n_minus[i] + tol;
            ok = ok && std::abs(s.n_minus[i] + s.n_zero(i) - 1.0) < 1e-15;
        }
    }
    CHECK(ok);
}

TEST_CASE("steady state") {
    RateParams p = busy_params();
    SUBCASE("fixed point of light evolution") {
        for (double power : {5e-6, 2e-4, 4.9e-3}) {
            auto s = steady_state(p, power);
            for (double dt : {1e-7, 1e-5, 1e-3}) {
                auto r = evolve_light(s, p, power, dt);
                for (int i = 0; i < kPools; ++i) {
                    CHECK(r.n_minus[i] == doctest::Approx(s.n_minus[i]).epsilon(1e-12));
                    CHECK(r.q[i] == doctest::Approx(s.q[i]).epsilon(1e-12));
                }
            }
        }
    }
    SUBCASE("equal rates give half occupancy") {
        RateParams q;
        q.k_ion = 2e6;
        q.k_rec_light = 2e6;
        CHECK(steady_state(q, 1e-4).n_minus[0] == doctest::Approx(0.5).epsilon(1e-14));
    }
    SUBCASE("dark power rejected") { CHECK_THROWS_AS(steady_state(p, 0.0), InvalidArgument); }
}

TEST_CASE("fluorescence rates") {
    RateParams p;
    EnsembleState s;
    SUBCASE("no excitation") {
        auto r = fluorescence_rates(s, p, 0.0);
        CHECK(r.minus == 0.0);
        CHECK(r.zero == 0.0);
    }
    SUBCASE("fully NV-: no NV0 emission") {
        s.n_minus = {1, 1};
        s.q = {0, 0};
        CHECK(fluorescence_rates(s, p, 1e-4).zero == 0.0);
    }
    SUBCASE("brightness formula: 1000 * (1 + 0.2) = 1200") {
        s.n_minus = {1, 1};
        s.q = {1, 1};
        p.c_spin = 0.2;
        const double power = 1e-5;
        p.beta_minus = 1000.0 / power;
        CHECK(fluorescence_rates(s, p, power).minus == doctest::Approx(1200.0).epsilon(1e-14));
    }
    SUBCASE("integrated fluorescence equals the integral of the instantaneous rate") {
        RateParams q = busy_params();
        auto s0 = steady_state(q, 1e-6);
        const double power = 2e-4, dt = 20e-6;
        auto in = Propagator::light(q, power, dt).integrate(s0);
        auto total = integrated_fluorescence(in, q, power);
        // Simpson over the closed-form trajectory.
        const int m = 2000;
        double acc_m = 0, acc_z = 0;
        for (int k = 0; k <= m; ++k) {
            double w = (k == 0 || k == m) ? 1 : (k % 2 ? 4 : 2);
            auto st = evolve_light(s0, q, power, dt * k / m);
            auto r = fluorescence_rates(st, q, power);
            acc_m += w * r.minus;
            acc_z += w * r.zero;
        }
        CHECK(total.minus == doctest::Approx(acc_m * dt / (3 * m)).epsilon(1e-9));
        CHECK(total.zero == doctest::Approx(acc_z * dt / (3 * m)).epsilon(1e-9));
    }
}

TEST_CASE("pi pulse") {
    RateParams p;
    EnsembleState s;
    s.n_minus = {0.9, 0.7};
    s.q = {0.6, 0.3};
    SUBCASE("f_mw = 0 is the identity") {
        p.f_mw = 0;
        CHECK(apply_pi_pulse(s, p) == s);
    }
    SUBCASE("f_mw = 1 is an involution that keeps the charge") {
        p.f_mw = 1;
        auto once = apply_pi_pulse(s, p);
        auto twice = apply_pi_pulse(once, p);
        CHECK(once.n_minus == s.n_minus);
        CHECK(twice.q[0] == doctest::Approx(s.q[0]).epsilon(1e-15));
        CHECK(twice.q[1] == doctest::Approx(s.q[1]).epsilon(1e-15));
    }
    SUBCASE("q = 0.6, f_mw = 1/8 -> 0.6 * (1 - 2/8) = 0.45") {
        p.f_mw = 0.125;
        CHECK(apply_pi_pulse(s, p).q[0] == doctest::Approx(0.45).epsilon(1e-14));
    }
}

TEST_CASE("parameter validation and JSON") {
    RateParams p;
    CHECK_NOTHROW(p.validate());
    p.w1 = 1.5;
    CHECK_THROWS_AS(p.validate(), InvalidArgument);
    p = RateParams{};
    p.t1 = -1;
    CHECK_THROWS_AS(p.validate(), InvalidArgument);

    RateParams q = busy_params();
    auto back = rate_params_from_json(to_json(q));
    CHECK(back.k_ion == q.k_ion);
    CHECK(back.p_ion == q.p_ion);
    CHECK(back.n_dark == q.n_dark);
    CHECK_THROWS_AS(rate_params_from_json({{"t_one", 1.0}}), InvalidArgument);
    CHECK_THROWS_AS(rate_params_from_json({{"t1", "fast"}}), InvalidArgument);
}

TEST_CASE("shipped preset reproduces the steady-state charge fractions") {
    // 73 % NV- at 5 uW and 21 % at 4.9 mW.
    auto p = load_rate_params(NVRELAX_PRESET);
    CHECK_NOTHROW(p.validate());
    CHECK(steady_state(p, 5e-6).n_minus[0] == doctest::Approx(0.73).epsilon(1e-4));
    CHECK(steady_state(p, 4.9e-3).n_minus[0] == doctest::Approx(0.21).epsilon(1e-4));
    CHECK(steady_state(p, 1e-4).n_minus[0] < 0.5 + 0.1);
}
