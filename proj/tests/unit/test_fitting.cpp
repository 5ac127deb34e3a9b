#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "nvrelax/error.hpp"
#include "nvrelax/fitting.hpp"

using namespace nvrelax;
using namespace nvrelax::fitting;

namespace {

std::vector<double> logspace(double a, double b, int n) {
    std::vector<double> x;
    for (int i = 0; i < n; ++i) x.push_back(a * std::pow(b / a, static_cast<double>(i) / (n - 1)));
    return x;
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> x;
    for (int i = 0; i < n; ++i) x.push_back(a + (b - a) * i / (n - 1));
    return x;
}

Trace sample(const Model& m, const Eigen::VectorXd& p, const std::vector<double>& x, double noise = 0,
             std::uint64_t seed = 1) {
    Trace t;
    t.x = x;
    Eigen::VectorXd f = m(p, x);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0, 1);
    for (Eigen::Index i = 0; i < f.size(); ++i) t.y.push_back(f[i] + noise * g(rng));
    return t;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

// Quadratic polynomial: linear in its parameters.
Model poly_model() {
    Model m{"poly", {"b0", "b1", "b2"}, {}};
    m.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f, Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->resize(n, 3);
        for (Eigen::Index i = 0; i < n; ++i) {
            double t = x[static_cast<std::size_t>(i)];
            f[i] = p[0] + p[1] * t + p[2] * t * t;
            if (J) {
                (*J)(i, 0) = 1;
                (*J)(i, 1) = t;
                (*J)(i, 2) = t * t;
            }
        }
    };
    return m;
}

}  // namespace

TEST_CASE("minimize on a linear model equals the closed-form weighted solution") {
    auto x = linspace(-2, 3, 25);
    Trace t = sample(poly_model(), vec({0.5, -1.2, 0.3}), x, 0.2, 3);
    for (std::size_t i = 0; i < x.size(); ++i) t.sigma.push_back(0.1 + 0.05 * (i % 4));

    // Normal equations, solved independently.
    Eigen::MatrixXd N = Eigen::MatrixXd::Zero(3, 3);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(3);
    for (std::size_t i = 0; i < x.size(); ++i) {
        Eigen::Vector3d row(1, x[i], x[i] * x[i]);
        double w = 1 / (t.sigma[i] * t.sigma[i]);
        N += w * row * row.transpose();
        rhs += w * t.y[i] * row;
    }
    Eigen::VectorXd beta = N.ldlt().solve(rhs);

    auto r = minimize(poly_model(), t, vec({0, 0, 0}));
    for (int k = 0; k < 3; ++k) CHECK(std::abs(r.values[k] - beta[k]) < 1e-10 * std::max(1.0, std::abs(beta[k])));
    auto ls = linear_least_squares(
        [&] {
            Eigen::MatrixXd X(x.size(), 3);
            for (std::size_t i = 0; i < x.size(); ++i) X.row(static_cast<Eigen::Index>(i)) << 1, x[i], x[i] * x[i];
            return X;
        }(),
        t.y, t.sigma);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(ls[k] - beta[k]) < 1e-10 * std::max(1.0, std::abs(beta[k])));
}

TEST_CASE("minimize: start at the optimum and a quadratic bowl") {
    auto x = logspace(1e-5, 1e-2, 20);
    auto truth = vec({1.0, 1.4e-3, 0.0});
    Trace t = sample(monoexp_model(), truth, x);
    auto r = minimize(monoexp_model(), t, truth);
    CHECK(r.n_iter <= 1);
    CHECK(r.rmse == 0.0);

    // Residual p_i - c_i over three points: the minimum is p = c.
    Model bowl{"bowl", {"u", "v", "w"}, {}};
    bowl.eval = [](const Eigen::VectorXd& p, const std::vector<double>&, Eigen::VectorXd& f, Eigen::MatrixXd* J) {
        f = p;
        if (J) *J = Eigen::MatrixXd::Identity(3, 3);
    };
    Trace b{{0, 1, 2}, {3.0, -2.0, 0.5}, {}};
    auto rb = minimize(bowl, b, vec({0, 0, 0}));
    CHECK(rb.values[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(rb.values[1] == doctest::Approx(-2.0).epsilon(1e-14));
    CHECK(rb.values[2] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("analytic Jacobians agree with central differences") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    struct Case {
        Model m;
        Eigen::VectorXd p;
        std::vector<double> x;
    };
    std::vector<Case> cases = {
        {monoexp_model(), vec({0.7, 1.4e-3, 0.2}), logspace(1e-5, 1e-2, 15)},
        {biexp_model(), vec({0.3, 1e-4, 0.2, 2e-3, 1.0}), logspace(1e-5, 1e-2, 15)},
        {triexp_model(), vec({0.02, 1e-4, 0.03, 2e-3, 0.05, 1.4e-3, 1.0}), logspace(1e-5, 1e-2, 15)},
        {lorentzian_sum_model(2), vec({1.0, 0.02, 2.8e9, 8e6, 0.015, 2.9e9, 1e7}), linspace(2.75e9, 2.95e9, 30)},
        {rabi_model(), vec({0.1, 1e-6, std::numbers::pi / 170e-9, 0.3, 1.0}), linspace(0, 1e-6, 40)},
    };
    for (auto& c : cases) {
        for (int trial = 0; trial < 5; ++trial) {
            Eigen::VectorXd p = c.p;
            // Dip centers move within the sampled band; far outside it the derivatives vanish.
            const bool lorentz = c.m.id == "lorentzian_sum";
            for (Eigen::Index k = 0; k < p.size(); ++k)
                p[k] *= lorentz && k % 3 == 2 ? 1 + 0.02 * (u(rng) - 1) : u(rng);
            Eigen::VectorXd f;
            Eigen::MatrixXd J;
            c.m.eval(p, c.x, f, &J);
            for (Eigen::Index k = 0; k < p.size(); ++k) {
                double h = 1e-6 * std::abs(p[k]);
                Eigen::VectorXd pp = p, pm = p;
                pp[k] += h;
                pm[k] -= h;
                Eigen::VectorXd d = (c.m(pp, c.x) - c.m(pm, c.x)) / (2 * h);
                double scale = std::max(d.cwiseAbs().maxCoeff(), 1e-300);
                double err = (d - J.col(k)).cwiseAbs().maxCoeff() / scale;
                INFO(c.m.id << " parameter " << c.m.names[static_cast<std::size_t>(k)]);
                CHECK(err < 1e-5);
            }
        }
    }
}

TEST_CASE("monoexponential fits") {
    auto x = logspace(10e-6, 10e-3, 20);
    auto r = fit_monoexp(sample(monoexp_model(), vec({1.0, 1.4e-3, 0.0}), x));
    CHECK(r.value("A") == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(r.value("T") == doctest::Approx(1.4e-3).epsilon(1e-8));
    CHECK(std::abs(r.value("d")) < 1e-8);

    SUBCASE("uniform rescaling of the weights changes nothing") {
        Trace t = sample(monoexp_model(), vec({0.05, 1.4e-3, 1.0}), x, 0.002, 5);
        t.sigma.assign(x.size(), 0.002);
        auto a = fit_monoexp(t);
        for (auto& s : t.sigma) s *= 7.0;
        auto b = fit_monoexp(t);
        for (Eigen::Index k = 0; k < 3; ++k) {
            CHECK(a.values[k] == doctest::Approx(b.values[k]).epsilon(1e-9));
            CHECK(a.errors[k] == doctest::Approx(b.errors[k]).epsilon(1e-6));
        }
    }
    SUBCASE("too few points") {
        Trace t{{1, 2, 3}, {1, 2, 3}, {}};
        CHECK_THROWS_AS(fit_monoexp(t), InvalidArgument);
    }
}

TEST_CASE("biexponential fits") {
    auto x = logspace(10e-6, 10e-3, 20);
    SUBCASE("noiseless roundtrip to 1e-6") {
        auto r = fit_biexp(sample(biexp_model(), vec({0.4, 109e-6, 0.6, 2.1e-3, 0.1}), x));
        CHECK(r.value("T_R1") == doctest::Approx(109e-6).epsilon(1e-6));
        CHECK(r.value("T_R2") == doctest::Approx(2.1e-3).epsilon(1e-6));
        CHECK(r.value("A") == doctest::Approx(0.4).epsilon(1e-6));
        CHECK_FALSE(r.degenerate);
    }
    SUBCASE("swapping the components gives the same canonical result") {
        auto a = fit_biexp(sample(biexp_model(), vec({0.4, 109e-6, 0.6, 2.1e-3, 0.1}), x, 1e-3, 2));
        auto b = fit_biexp(sample(biexp_model(), vec({0.6, 2.1e-3, 0.4, 109e-6, 0.1}), x, 1e-3, 2));
        for (Eigen::Index k = 0; k < 5; ++k) CHECK(a.values[k] == doctest::Approx(b.values[k]).epsilon(1e-8));
        CHECK(a.value("T_R1") < a.value("T_R2"));
    }
    SUBCASE("single exponential is flagged degenerate") {
        auto r = fit_biexp(sample(monoexp_model(), vec({1.0, 500e-6, 0.2}), x, 1e-4, 3));
        CHECK(r.degenerate);
    }
    SUBCASE("needs a decade of x") {
        CHECK_THROWS_AS(fit_biexp(sample(biexp_model(), vec({0.4, 1e-4, 0.6, 2e-3, 0}), linspace(1e-3, 5e-3, 10))),
                        InvalidArgument);
    }
}

TEST_CASE("triexponential fit with fixed time constants") {
    auto x = logspace(10e-6, 10e-3, 20);
    SUBCASE("linear roundtrip to 1e-10") {
        auto r = fit_triexp_fixed(sample(triexp_model(), vec({0.02, 100e-6, 0.03, 2e-3, 0.05, 1.4e-3, 1.0}), x), 100e-6,
                                  2e-3, 1.4e-3);
        CHECK(std::abs(r.value("A") - 0.02) < 1e-10);
        CHECK(std::abs(r.value("B") - 0.03) < 1e-10);
        CHECK(std::abs(r.value("C") - 0.05) < 1e-10);
        CHECK(std::abs(r.value("d") - 1.0) < 1e-10);
        CHECK(r.fixed[1]);
        CHECK(r.fixed[3]);
        CHECK(r.fixed[5]);
    }
    SUBCASE("no recharge terms reduces to the spin decay") {
        auto r = fit_triexp_fixed(sample(triexp_model(), vec({0, 100e-6, 0, 2e-3, 0.05, 1.4e-3, 1.0}), x), 100e-6, 2e-3, 1.4e-3);
        CHECK(std::abs(r.value("A")) < 1e-10);
        CHECK(std::abs(r.value("B")) < 1e-10);
        CHECK(r.value("C") == doctest::Approx(0.05).epsilon(1e-9));
    }
    SUBCASE("nested models: triexp rmse never exceeds monoexp with T fixed to t1") {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            Trace t = sample(triexp_model(), vec({0.01, 100e-6, 0.02, 2e-3, 0.04, 1.4e-3, 1.0}), x, 0.003, seed);
            auto tri = fit_triexp_fixed(t, 100e-6, 2e-3, 1.4e-3);
            MinimizeOptions opt;
            opt.fixed = {false, true, false};
            auto mono = minimize(monoexp_model(), t, vec({0.04, 1.4e-3, 1.0}), opt);
            CHECK(tri.rmse <= mono.rmse + 1e-15);
        }
    }
}

TEST_CASE("Lorentzian dips") {
    SUBCASE("single dip exact") {
        auto x = linspace(2.80e9, 2.94e9, 400);
        auto r = fit_lorentzian_sum(sample(lorentzian_sum_model(1), vec({1.0, 0.03, 2.871e9, 6e6}), x), 1);
        CHECK(r.value("f0") == doctest::Approx(2.871e9).epsilon(1e-9));
        CHECK(r.value("w0") == doctest::Approx(6e6).epsilon(1e-6));
    }
    SUBCASE("eight dips at 1 % noise: centers within w/10 (Monte Carlo)") {
        const std::vector<double> centers{2.55e9, 2.63e9, 2.71e9, 2.79e9, 2.95e9, 3.03e9, 3.11e9, 3.19e9};
        const double w = 10e6;
        Eigen::VectorXd p(1 + 3 * 8);
        p[0] = 1.0;
        for (int i = 0; i < 8; ++i) p.segment(1 + 3 * i, 3) << 0.02, centers[static_cast<std::size_t>(i)], w;
        auto x = linspace(2.5e9, 3.24e9, 1500);
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            Trace t = sample(lorentzian_sum_model(8), p, x, 0.01 * 0.02, seed);
            auto r = fit_lorentzian_sum(t, 8);
            for (int i = 0; i < 8; ++i)
                CHECK(std::abs(r.value("f" + std::to_string(i)) - centers[static_cast<std::size_t>(i)]) < w / 10);
        }
    }
    SUBCASE("outermost pair gives the field of the forward model") {
        // f = D +- gamma B |cos theta_k| for the four NV axes.
        const double D = 2.87e9, B = 11.89e-3;
        const std::array<double, 4> proj{0.94, 0.61, 0.33, 0.12};
        std::vector<double> centers;
        for (double c : proj) {
            centers.push_back(D - kNvGyromagneticRatio * B * c);
            centers.push_back(D + kNvGyromagneticRatio * B * c);
        }
        std::sort(centers.begin(), centers.end());
        Eigen::VectorXd p(1 + 3 * 8);
        p[0] = 1.0;
        for (int i = 0; i < 8; ++i) p.segment(1 + 3 * i, 3) << 0.015, centers[static_cast<std::size_t>(i)], 8e6;
        auto r = fit_lorentzian_sum(sample(lorentzian_sum_model(8), p, linspace(2.5e9, 3.24e9, 2000), 1e-4, 4), 8);
        double field = field_from_splitting(r.derived.at("outer_splitting"), proj[0]);
        CHECK(std::abs(field - B) < 0.01e-3);
    }
}

TEST_CASE("Rabi oscillations") {
    const double omega = std::numbers::pi / 170e-9;
    auto x = linspace(0, 1.2e-6, 241);
    SUBCASE("noiseless: pi time 170 ns") {
        auto r = fit_rabi(sample(rabi_model(), vec({0.1, 2e-6, omega, 0.0, 1.0}), x));
        CHECK(r.derived.at("pi_time") == doctest::Approx(170e-9).epsilon(1e-8));
    }
    SUBCASE("phase is wrapped") {
        auto a = fit_rabi(sample(rabi_model(), vec({0.1, 2e-6, omega, 0.4, 1.0}), x, 1e-3, 6));
        auto b = fit_rabi(sample(rabi_model(), vec({0.1, 2e-6, omega, 0.4 + 2 * std::numbers::pi, 1.0}), x, 1e-3, 6));
        for (Eigen::Index k = 0; k < 5; ++k) CHECK(a.values[k] == doctest::Approx(b.values[k]).epsilon(1e-9));
        CHECK(a.value("Phi") > -std::numbers::pi);
        CHECK(a.value("Phi") <= std::numbers::pi);
    }
    SUBCASE("heavy damping: omega within 5 %") {
        const double period = 2 * std::numbers::pi / omega;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            auto r = fit_rabi(sample(rabi_model(), vec({0.1, period, omega, 0.0, 1.0}), x, 0.002, seed));
            CHECK(r.value("Omega") == doctest::Approx(omega).epsilon(0.05));
        }
    }
}

TEST_CASE("SNR") {
    auto x = logspace(10e-6, 10e-3, 20);
    std::vector<double> noise;
    std::mt19937_64 rng(12);
    std::normal_distribution<double> g(0, 0.001);
    for (std::size_t i = 0; i < x.size(); ++i) noise.push_back(g(rng));

    auto with_amplitude = [&](double a) {
        Trace t = sample(monoexp_model(), vec({a, 1.4e-3, 1.0}), x);
        for (std::size_t i = 0; i < x.size(); ++i) t.y[i] += noise[i];
        return t;
    };
    Trace t1 = with_amplitude(0.05), t2 = with_amplitude(0.10);
    // With T known the model is linear in the amplitude: the fitted amplitude moves by exactly
    // the added 0.05, the residuals stay, so the SNR grows by the area of the added signal.
    MinimizeOptions known_t;
    known_t.fixed = {false, true, false};
    auto k1 = minimize(monoexp_model(), t1, vec({0.01, 1.4e-3, 0.9}), known_t);
    auto k2 = minimize(monoexp_model(), t2, vec({0.01, 1.4e-3, 0.9}), known_t);
    CHECK(k2.rmse == doctest::Approx(k1.rmse).epsilon(1e-9));
    double added = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        added += 0.5 * 0.05 * (std::exp(-x[i] / 1.4e-3) + std::exp(-x[i - 1] / 1.4e-3)) * (x[i] - x[i - 1]);
    CHECK(snr(t2, k2) - snr(t1, k1) == doctest::Approx(added / k1.rmse).epsilon(1e-8));
    // Doubling the amplitude at fixed noise doubles the SNR up to the noise in the fitted amplitude.
    double s1 = snr(t1, fit_monoexp(t1)), s2 = snr(t2, fit_monoexp(t2));
    CHECK(s2 / s1 == doctest::Approx(2.0).epsilon(0.01));

    FitResult zero = fit_monoexp(t1);
    zero.values[0] = 0.0;
    CHECK(snr(t1, zero) == 0.0);

    // Contrast is the trapezoid area of the fit above its offset.
    auto r = fit_monoexp(t1);
    auto f = evaluate(r, x);
    double area = 0;
    for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (f[i] + f[i - 1] - 2 * r.value("d")) * (x[i] - x[i - 1]);
    CHECK(snr(t1, r) == doctest::Approx(area / r.rmse).epsilon(1e-12));
}

TEST_CASE("singular covariance is reported") {
    // Two identical time constants make the biexp Jacobian rank deficient.
    auto x = logspace(10e-6, 10e-3, 20);
    Trace t = sample(monoexp_model(), vec({1.0, 1e-3, 0.0}), x);
    MinimizeOptions opt;
    auto r = minimize(biexp_model(), t, vec({0.5, 1e-3, 0.5, 1e-3, 0.0}), opt);
    CHECK_FALSE(r.errors_available);
    CHECK(std::isnan(r.errors[0]));
}
