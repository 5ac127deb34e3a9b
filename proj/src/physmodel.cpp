#include "nvrelax/physmodel.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "nvrelax/error.hpp"

namespace nvrelax::physmodel {

namespace {

using Field = double RateParams::*;

const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = {
        {"t1", &RateParams::t1},
        {"t_r1", &RateParams::t_r1},
        {"t_r2", &RateParams::t_r2},
        {"w1", &RateParams::w1},
        {"k_ion", &RateParams::k_ion},
        {"p_ion", &RateParams::p_ion},
        {"k_rec_light", &RateParams::k_rec_light},
        {"k_pol", &RateParams::k_pol},
        {"s_max", &RateParams::s_max},
        {"n_dark", &RateParams::n_dark},
        {"beta_minus", &RateParams::beta_minus},
        {"beta_zero", &RateParams::beta_zero},
        {"c_spin", &RateParams::c_spin},
        {"f_mw", &RateParams::f_mw},
    };
    return table;
}

void require(bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string("RateParams: ") + what);
}

bool unit_interval(double v) { return v >= 0.0 && v <= 1.0; }

// (1 - exp(-a t)) / a, the integral of exp(-a u) over [0, t].
double decay_integral(double a, double t) {
    if (a == 0.0) return t;
    return -std::expm1(-a * t) / a;
}

// (exp(-a t) - exp(-b t)) / (b - a), symmetric in a and b.
double exp_difference(double a, double b, double t) {
    double lo = std::min(a, b);
    double gap = std::abs(b - a);
    if (gap == 0.0) return t * std::exp(-lo * t);
    return std::exp(-lo * t) * (-std::expm1(-gap * t)) / gap;
}

// Integral over [0, t] of exp_difference(a, b, u).
double exp_difference_integral(double a, double b, double t) {
    double gap = std::abs(b - a);
    double scale = std::max(a, b);
    if (gap <= 1e-6 * scale || gap * t < 1e-9) {
        // Limit a == b evaluated at the midpoint rate: integral of u exp(-m u).
        double m = 0.5 * (a + b);
        if (m * t < 1e-8) return 0.5 * t * t;
        double e = std::exp(-m * t);
        return (-std::expm1(-m * t) - m * t * e) / (m * m);
    }
    return (decay_integral(a, t) - decay_integral(b, t)) / (b - a);
}

}  // namespace

void RateParams::validate() const {
    require(t1 > 0, "t1 must be > 0");
    require(t_r1 > 0, "t_r1 must be > 0");
    require(t_r2 > 0, "t_r2 must be > 0");
    require(t_r1 < t_r2, "t_r1 must be shorter than t_r2");
    require(unit_interval(w1), "w1 must lie in [0,1]");
    require(k_ion >= 0, "k_ion must be >= 0");
    require(std::isfinite(p_ion) && p_ion > 0, "p_ion must be > 0");
    require(k_rec_light >= 0, "k_rec_light must be >= 0");
    require(k_pol >= 0, "k_pol must be >= 0");
    require(unit_interval(s_max), "s_max must lie in [0,1]");
    require(unit_interval(n_dark), "n_dark must lie in [0,1]");
    require(beta_minus >= 0, "beta_minus must be >= 0");
    require(beta_zero >= 0, "beta_zero must be >= 0");
    require(unit_interval(c_spin), "c_spin must lie in [0,1]");
    require(unit_interval(f_mw), "f_mw must lie in [0,1]");
}

nlohmann::json to_json(const RateParams& params) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, field] : field_table()) j[key] = params.*field;
    return j;
}

RateParams rate_params_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidArgument("RateParams: expected a JSON object");
    RateParams params;
    const auto& table = field_table();
    for (const auto& [key, value] : j.items()) {
        auto it = table.find(key);
        if (it == table.end()) throw InvalidArgument("RateParams: unknown key '" + key + "'");
        if (!value.is_number()) throw InvalidArgument("RateParams: key '" + key + "' is not a number");
        params.*(it->second) = value.get<double>();
    }
    params.validate();
    return params;
}

RateParams load_rate_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open parameter file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument("malformed JSON in " + path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("params")) {
        for (const auto& [key, value] : j.items()) {
            if (key != "params" && key != "name" && key != "description" && key != "fit" &&
                key != "detection")
                throw InvalidArgument("preset: unknown key '" + key + "'");
        }
        return rate_params_from_json(j.at("params"));
    }
    return rate_params_from_json(j);
}

EnsembleState EnsembleState::dark_equilibrium(const RateParams& params) {
    EnsembleState s;
    s.n_minus.fill(params.n_dark);
    s.q.fill(0.0);
    return s;
}

double EnsembleState::mean_n_minus(const RateParams& params) const {
    double acc = 0;
    for (int i = 0; i < kPools; ++i) acc += params.pool_weight(i) * n_minus[i];
    return acc;
}

LightRates light_rates(const RateParams& params, double power) {
    LightRates r;
    if (power <= 0) return r;
    r.ionization = params.k_ion * std::pow(power, params.p_ion);
    r.recombination = params.k_rec_light * power;
    r.pumping = params.k_pol * power;
    return r;
}

Propagator Propagator::identity() { return Propagator{}; }

Propagator Propagator::dark(const RateParams& params, double dt) {
    if (!(dt >= 0)) throw InvalidArgument("propagation interval must be >= 0");
    Propagator p;
    p.duration_ = dt;
    double eq = std::exp(-dt / params.t1);
    double iq = params.t1 * -std::expm1(-dt / params.t1);
    for (int i = 0; i < kPools; ++i) {
        double tr = params.recharge_time(i);
        double en = std::exp(-dt / tr);
        double in = tr * -std::expm1(-dt / tr);
        auto& m = p.pools_[i];
        m.nn = en;
        m.n0 = params.n_dark * -std::expm1(-dt / tr);
        m.qq = eq;
        m.qn = 0;
        m.q0 = 0;
        m.in_n = in;
        m.in_0 = params.n_dark * (dt - in);
        m.iq_q = iq;
        m.iq_n = 0;
        m.iq_0 = 0;
    }
    return p;
}

Propagator Propagator::light(const RateParams& params, double power, double dt) {
    if (!(power >= 0)) throw InvalidArgument("laser power must be >= 0");
    if (power == 0) return dark(params, dt);
    if (!(dt >= 0)) throw InvalidArgument("propagation interval must be >= 0");

    const LightRates r = light_rates(params, power);
    const double charge_rate = r.ionization + r.recombination;
    // Polarized population is lost to relaxation, to ionization, and replaced by pumping.
    const double spin_rate = r.pumping + 1.0 / params.t1 + r.ionization;
    const double n_inf = charge_rate > 0 ? r.recombination / charge_rate : 1.0;
    const double source = r.pumping * params.s_max;
    const double q_inf = source * n_inf / spin_rate;

    const double en = std::exp(-charge_rate * dt);
    const double eq = std::exp(-spin_rate * dt);
    const double in = decay_integral(charge_rate, dt);
    const double iq = decay_integral(spin_rate, dt);
    const double cross = source * exp_difference(charge_rate, spin_rate, dt);
    const double cross_int = source * exp_difference_integral(charge_rate, spin_rate, dt);

    Propagator p;
    p.duration_ = dt;
    for (auto& m : p.pools_) {
        m.nn = en;
        m.n0 = n_inf * -std::expm1(-charge_rate * dt);
        m.qq = eq;
        m.qn = cross;
        m.q0 = q_inf * -std::expm1(-spin_rate * dt) - cross * n_inf;
        m.in_n = in;
        m.in_0 = n_inf * (dt - in);
        m.iq_q = iq;
        m.iq_n = cross_int;
        m.iq_0 = q_inf * (dt - iq) - cross_int * n_inf;
    }
    return p;
}

Propagator Propagator::then(const Propagator& next) const {
    Propagator out;
    out.duration_ = duration_ + next.duration_;
    for (int i = 0; i < kPools; ++i) {
        const PoolMap& a = pools_[i];
        const PoolMap& b = next.pools_[i];
        PoolMap& c = out.pools_[i];
        // State: n'' = b.nn*(a.nn n + a.n0) + b.n0
        c.nn = b.nn * a.nn;
        c.n0 = b.nn * a.n0 + b.n0;
        // q'' = b.qq*q' + b.qn*n' + b.q0
        c.qq = b.qq * a.qq;
        c.qn = b.qq * a.qn + b.qn * a.nn;
        c.q0 = b.qq * a.q0 + b.qn * a.n0 + b.q0;
        // Integrals accumulate: I = I_a(x) + I_b(x')
        c.in_n = a.in_n + b.in_n * a.nn;
        c.in_0 = a.in_0 + b.in_n * a.n0 + b.in_0;
        c.iq_q = a.iq_q + b.iq_q * a.qq;
        c.iq_n = a.iq_n + b.iq_q * a.qn + b.iq_n * a.nn;
        c.iq_0 = a.iq_0 + b.iq_q * a.q0 + b.iq_n * a.n0 + b.iq_0;
    }
    return out;
}

EnsembleState Propagator::apply(const EnsembleState& s) const {
    EnsembleState out;
    for (int i = 0; i < kPools; ++i) {
        const PoolMap& m = pools_[i];
        out.n_minus[i] = m.nn * s.n_minus[i] + m.n0;
        out.q[i] = m.qq * s.q[i] + m.qn * s.n_minus[i] + m.q0;
    }
    return out;
}

PoolIntegrals Propagator::integrate(const EnsembleState& s) const {
    PoolIntegrals out;
    out.duration = duration_;
    for (int i = 0; i < kPools; ++i) {
        const PoolMap& m = pools_[i];
        out.n_minus[i] = m.in_n * s.n_minus[i] + m.in_0;
        out.q[i] = m.iq_q * s.q[i] + m.iq_n * s.n_minus[i] + m.iq_0;
    }
    return out;
}

EnsembleState evolve_dark(const EnsembleState& state, const RateParams& params, double dt) {
    if (!(dt >= 0)) throw InvalidArgument("evolve_dark: dt must be >= 0");
    if (dt == 0) return state;
    return Propagator::dark(params, dt).apply(state);
}

EnsembleState evolve_light(const EnsembleState& state, const RateParams& params, double power,
                           double dt) {
    if (!(power >= 0)) throw InvalidArgument("evolve_light: power must be >= 0");
    if (!(dt >= 0)) throw InvalidArgument("evolve_light: dt must be >= 0");
    if (power == 0) return evolve_dark(state, params, dt);
    if (dt == 0) return state;
    return Propagator::light(params, power, dt).apply(state);
}

EnsembleState steady_state(const RateParams& params, double power) {
    if (!(power > 0)) {
        throw InvalidArgument("steady_state: power must be > 0 (the dark fixed point is n_dark)");
    }
    const LightRates r = light_rates(params, power);
    const double charge_rate = r.ionization + r.recombination;
    const double n_inf = charge_rate > 0 ? r.recombination / charge_rate : 1.0;
    const double spin_rate = r.pumping + 1.0 / params.t1 + r.ionization;
    const double q_inf = r.pumping * params.s_max * n_inf / spin_rate;
    EnsembleState s;
    s.n_minus.fill(n_inf);
    s.q.fill(q_inf);
    return s;
}

FluorescenceRates fluorescence_rates(const EnsembleState& state, const RateParams& params,
                                     double power) {
    if (!(power >= 0)) throw InvalidArgument("fluorescence_rates: power must be >= 0");
    FluorescenceRates out;
    if (power == 0) return out;
    double minus = 0, zero = 0;
    for (int i = 0; i < kPools; ++i) {
        double w = params.pool_weight(i);
        minus += w * (state.n_minus[i] + params.c_spin * state.q[i]);
        zero += w * (1.0 - state.n_minus[i]);
    }
    out.minus = params.beta_minus * power * minus;
    out.zero = params.beta_zero * power * zero;
    return out;
}

FluorescenceRates integrated_fluorescence(const PoolIntegrals& integrals,
                                          const RateParams& params, double power) {
    FluorescenceRates out;
    if (power <= 0) return out;
    double minus = 0, zero = 0;
    for (int i = 0; i < kPools; ++i) {
        double w = params.pool_weight(i);
        minus += w * (integrals.n_minus[i] + params.c_spin * integrals.q[i]);
        zero += w * (integrals.duration - integrals.n_minus[i]);
    }
    out.minus = params.beta_minus * power * minus;
    out.zero = params.beta_zero * power * zero;
    return out;
}

EnsembleState apply_pi_pulse(const EnsembleState& state, const RateParams& params) {
    EnsembleState out = state;
    const double factor = 1.0 - 2.0 * params.f_mw;
    for (auto& q : out.q) q *= factor;
    return out;
}

}  // namespace nvrelax::physmodel
