#pragma once

#include <array>
#include <vector>

#include <json.hpp>

namespace nvrelax::calibration {

struct LinearFit {
    double slope = 0;
    double intercept = 0;
    double slope_se = 0;
    double intercept_se = 0;
    double cov_slope_intercept = 0;
    double chi2 = 0;
};

/// Inverse-variance weighted straight-line fit. Standard errors use the given sigmas as
/// absolute uncertainties. Needs >= 3 points, all sigma > 0, and at least two distinct x.
LinearFit weighted_linear_fit(const std::vector<double>& x, const std::vector<double>& y,
                              const std::vector<double>& sigma);

struct PowerSeriesPoint {
    double power = 0;         ///< W
    double c_minus = 0;
    double c_zero = 0;
    double total_counts = 0;  ///< counts/s
    double sigma_c = 0;       ///< standard error of c_minus; 0 if unknown
};

struct KappaEstimate {
    double kappa = 1.0;
    double sigma = 0.0;       ///< NaN when not identifiable
    bool identifiable = true; ///< false when the series shows no charge conversion
};

/// Optical geometry used to convert the saturation intensity into a power limit.
struct KappaOptions {
    double saturation_intensity = 1e9;  ///< W/m^2 (100 kW/cm^2)
    double spot_diameter = 700e-9;      ///< m, 1/e^2 diameter
    std::size_t min_points = 5;
};

/// Peak intensity of a Gaussian spot: 2P / (pi w^2) with w the 1/e^2 radius.
double peak_intensity(double power, double spot_diameter);
double power_for_intensity(double intensity, double spot_diameter);

/// Kappa from a sub-saturation power series. Measured per-species counts M_s = c_s * total are
/// compared with linear references extrapolated from the lowest power; kappa is the ratio of
/// the NV- slope deficit to the NV0 slope excess, which equals the brightness ratio.
KappaEstimate estimate_kappa(std::vector<PowerSeriesPoint> series, const KappaOptions& options = {});

struct KappaSummary {
    double mean = 0;
    double sd = 0;
    double weighted_mean = 0;
    double weighted_se = 0;
    std::size_t count = 0;
};
/// Unweighted mean/SD and inverse-variance mean over identifiable estimates.
KappaSummary summarize_kappas(const std::vector<KappaEstimate>& estimates);

struct RatioMap {
    double a = 0;
    double n = 0;
    std::array<std::array<double, 2>, 2> covariance{};  ///< order (a, n)
};

struct RatioPoint {
    double x = 0;      ///< channel count ratio
    double y = 0;      ///< concentration ratio
    double sigma = 0;  ///< uncertainty of y
};

/// y = a x^n by weighted nonlinear least squares, initialized from a log-log line.
RatioMap fit_ratio_map(const std::vector<RatioPoint>& points);

struct MappedRatio {
    double value = 0;
    double sigma = 0;
};
MappedRatio map_count_ratio(const RatioMap& map, double x);

nlohmann::json to_json(const RatioMap& map);
RatioMap ratio_map_from_json(const nlohmann::json& j);
nlohmann::json to_json(const KappaEstimate& k);

}  // namespace nvrelax::calibration
