#pragma once

#include <array>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace nvrelax::physmodel {

/// Number of recharge subpopulations: index 0 recharges fast (t_r1), index 1 slow (t_r2).
inline constexpr int kPools = 2;

/// Physical constants of the simulated NV ensemble. All values SI.
struct RateParams {
    double t1 = 1.42e-3;         ///< spin relaxation time T1 [s]
    double t_r1 = 109e-6;        ///< fast dark-recharge time [s]
    double t_r2 = 2.1e-3;        ///< slow dark-recharge time [s]
    double w1 = 0.5;             ///< weight of the fast-recharge pool
    double k_ion = 1e6;          ///< ionization coefficient [s^-1 W^-p_ion]
    double p_ion = 1.0;          ///< power exponent of ionization
    double k_rec_light = 4e6;    ///< light-driven recombination [s^-1 W^-1]
    double k_pol = 1e9;          ///< optical spin pumping [s^-1 W^-1]
    double s_max = 0.8;          ///< asymptotic spin polarization under light
    double n_dark = 1.0;         ///< dark-equilibrium NV- occupancy
    double beta_minus = 1.97e10; ///< NV- brightness [counts s^-1 W^-1]
    double beta_zero = 1e10;     ///< NV0 brightness [counts s^-1 W^-1]
    double c_spin = 0.2;         ///< fluorescence contrast of the polarized spin state
    double f_mw = 0.125;         ///< fraction of NV- addressed by the pi pulse

    /// Throws InvalidArgument naming the first offending field.
    void validate() const;

    [[nodiscard]] double pool_weight(int pool) const { return pool == 0 ? w1 : 1.0 - w1; }
    [[nodiscard]] double recharge_time(int pool) const { return pool == 0 ? t_r1 : t_r2; }
};

nlohmann::json to_json(const RateParams& params);

/// Strict parse of a flat key/value object: unknown keys and non-numbers are rejected.
/// Missing keys keep their defaults.
RateParams rate_params_from_json(const nlohmann::json& j);

/// Loads either a flat RateParams object or a preset wrapper
/// `{"name": ..., "description": ..., "params": {...}}`.
RateParams load_rate_params(const std::filesystem::path& path);

/// Charge and spin state of the two recharge pools.
///
/// `q` is the polarized NV- population (spin polarization times NV- occupancy),
/// which keeps the dynamics linear because recharged centers arrive unpolarized.
struct EnsembleState {
    std::array<double, kPools> n_minus{1.0, 1.0};
    std::array<double, kPools> q{0.0, 0.0};

    /// Fully relaxed dark state: n_minus = n_dark, no polarization.
    static EnsembleState dark_equilibrium(const RateParams& params);

    [[nodiscard]] double n_zero(int pool) const { return 1.0 - n_minus[pool]; }
    /// Mean NV- occupancy weighted over pools.
    [[nodiscard]] double mean_n_minus(const RateParams& params) const;

    bool operator==(const EnsembleState&) const = default;
};

/// Time integrals of the per-pool populations over a propagation interval.
struct PoolIntegrals {
    std::array<double, kPools> n_minus{};  ///< integral of n_minus [s]
    std::array<double, kPools> q{};        ///< integral of q [s]
    double duration = 0.0;
};

/// Exact affine propagator of the pool populations over a fixed interval at fixed power.
///
/// Per pool: n' = nn*n + n0 and q' = qq*q + qn*n + q0; the running integrals are affine in
/// the initial state in the same way. Composition with then() is exact, so a segment can be
/// assembled from sub-steps and reused across repetitions.
class Propagator {
public:
    static Propagator identity();
    static Propagator dark(const RateParams& params, double dt);
    /// power == 0 falls back to dark().
    static Propagator light(const RateParams& params, double power, double dt);

    /// Propagator for "this interval followed by `next`".
    [[nodiscard]] Propagator then(const Propagator& next) const;

    [[nodiscard]] EnsembleState apply(const EnsembleState& state) const;
    [[nodiscard]] PoolIntegrals integrate(const EnsembleState& state) const;
    [[nodiscard]] double duration() const { return duration_; }

private:
    struct PoolMap {
        double nn = 1, n0 = 0;
        double qq = 1, qn = 0, q0 = 0;
        double in_n = 0, in_0 = 0;
        double iq_q = 0, iq_n = 0, iq_0 = 0;
    };
    std::array<PoolMap, kPools> pools_{};
    double duration_ = 0.0;
};

/// Dark evolution: NV- relaxes to n_dark with each pool's recharge time, q decays with T1.
EnsembleState evolve_dark(const EnsembleState& state, const RateParams& params, double dt);

/// Illuminated evolution at constant power (closed form). power == 0 is evolve_dark.
EnsembleState evolve_light(const EnsembleState& state, const RateParams& params, double power,
                           double dt);

/// Fixed point of evolve_light at the given power. Throws InvalidArgument for power <= 0.
EnsembleState steady_state(const RateParams& params, double power);

/// Light-driven rates at a given power.
struct LightRates {
    double ionization = 0;    ///< k_ion * P^p_ion
    double recombination = 0; ///< k_rec_light * P
    double pumping = 0;       ///< k_pol * P
};
LightRates light_rates(const RateParams& params, double power);

struct FluorescenceRates {
    double minus = 0;  ///< NV- emission [counts/s]
    double zero = 0;   ///< NV0 emission [counts/s]
};

FluorescenceRates fluorescence_rates(const EnsembleState& state, const RateParams& params,
                                     double power);

/// Emitted counts over an interval whose pool integrals are given, at constant power.
FluorescenceRates integrated_fluorescence(const PoolIntegrals& integrals,
                                          const RateParams& params, double power);

/// Instantaneous resonant pi pulse: the addressed fraction inverts its polarization.
EnsembleState apply_pi_pulse(const EnsembleState& state, const RateParams& params);

}  // namespace nvrelax::physmodel
