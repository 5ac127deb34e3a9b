#include "nvrelax/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "nvrelax/error.hpp"
#include "nvrelax/fitting.hpp"

namespace nvrelax::calibration {

LinearFit weighted_linear_fit(const std::vector<double>& x, const std::vector<double>& y,
                              const std::vector<double>& sigma) {
    if (x.size() != y.size() || x.size() != sigma.size())
        throw InvalidArgument("weighted_linear_fit: input lengths differ");
    if (x.size() < 3) throw InvalidArgument("weighted_linear_fit: need at least 3 points");
    double S = 0, Sx = 0, Sy = 0, Sxx = 0, Sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(sigma[i] > 0)) throw InvalidArgument("weighted_linear_fit: sigma must be > 0");
        double w = 1.0 / (sigma[i] * sigma[i]);
        S += w;
        Sx += w * x[i];
        Sy += w * y[i];
        Sxx += w * x[i] * x[i];
        Sxy += w * x[i] * y[i];
    }
    // Centered form keeps the determinant well conditioned.
    double xbar = Sx / S;
    double ybar = Sy / S;
    double Dxx = 0, Dxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double w = 1.0 / (sigma[i] * sigma[i]);
        Dxx += w * (x[i] - xbar) * (x[i] - xbar);
        Dxy += w * (x[i] - xbar) * (y[i] - ybar);
    }
    if (!(Dxx > 0)) throw NumericalError("weighted_linear_fit: all x values coincide");
    LinearFit f;
    f.slope = Dxy / Dxx;
    f.intercept = ybar - f.slope * xbar;
    f.slope_se = std::sqrt(1.0 / Dxx);
    f.intercept_se = std::sqrt(1.0 / S + xbar * xbar / Dxx);
    f.cov_slope_intercept = -xbar / Dxx;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double r = (y[i] - f.intercept - f.slope * x[i]) / sigma[i];
        f.chi2 += r * r;
    }
    return f;
}

double peak_intensity(double power, double spot_diameter) {
    double w = 0.5 * spot_diameter;
    return 2.0 * power / (std::numbers::pi * w * w);
}

double power_for_intensity(double intensity, double spot_diameter) {
    double w = 0.5 * spot_diameter;
    return intensity * std::numbers::pi * w * w / 2.0;
}

KappaEstimate estimate_kappa(std::vector<PowerSeriesPoint> series, const KappaOptions& options) {
    if (series.size() < options.min_points)
        throw InvalidArgument("estimate_kappa: need at least " + std::to_string(options.min_points) +
                              " power points");
    const double p_sat = power_for_intensity(options.saturation_intensity, options.spot_diameter);
    for (const auto& pt : series) {
        if (!(pt.power > 0)) throw InvalidArgument("estimate_kappa: powers must be > 0");
        if (pt.power > p_sat)
            throw InvalidArgument("estimate_kappa: power above the saturation threshold (" +
                                  std::to_string(options.saturation_intensity / 1e7) + " kW/cm^2, " +
                                  std::to_string(p_sat * 1e3) + " mW)");
        if (!(pt.total_counts >= 0)) throw InvalidArgument("estimate_kappa: total_counts must be >= 0");
    }
    std::stable_sort(series.begin(), series.end(),
                     [](const auto& a, const auto& b) { return a.power < b.power; });

    const std::size_t n = series.size();
    const bool have_sigma = std::all_of(series.begin(), series.end(),
                                        [](const auto& p) { return p.sigma_c > 0; });
    const PowerSeriesPoint& ref = series.front();
    std::vector<double> P(n), m_minus(n), m_zero(n), l_minus(n), l_zero(n), s_m(n), s_l(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& pt = series[i];
        double scale = pt.power / ref.power;
        P[i] = pt.power;
        m_minus[i] = pt.c_minus * pt.total_counts;
        m_zero[i] = pt.c_zero * pt.total_counts;
        l_minus[i] = ref.c_minus * ref.total_counts * scale;
        l_zero[i] = ref.c_zero * ref.total_counts * scale;
        // c- and c0 = 1 - c- share one uncertainty, so both species carry the same weights.
        s_m[i] = have_sigma ? pt.sigma_c * pt.total_counts : 1.0;
        s_l[i] = have_sigma ? ref.sigma_c * ref.total_counts * scale : 1.0;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!(s_m[i] > 0) || !(s_l[i] > 0))
            throw InvalidArgument("estimate_kappa: zero total counts in the series");

    const LinearFit fm_minus = weighted_linear_fit(P, m_minus, s_m);
    const LinearFit fm_zero = weighted_linear_fit(P, m_zero, s_m);
    const LinearFit fl_minus = weighted_linear_fit(P, l_minus, s_l);
    const LinearFit fl_zero = weighted_linear_fit(P, l_zero, s_l);

    const double deficit = fl_minus.slope - fm_minus.slope;
    const double excess = fm_zero.slope - fl_zero.slope;
    const double scale = std::abs(fl_minus.slope) + std::abs(fl_zero.slope);

    KappaEstimate out;
    if (std::abs(deficit) <= 1e-9 * scale && std::abs(excess) <= 1e-9 * scale) {
        // Constant charge fractions: the two counting efficiencies cannot be separated.
        out.kappa = 1.0;
        out.sigma = std::numeric_limits<double>::quiet_NaN();
        out.identifiable = false;
        return out;
    }
    if (!(excess != 0) || !(deficit / excess > 0))
        throw NumericalError("estimate_kappa: slope deficits have inconsistent signs");
    out.kappa = deficit / excess;
    if (have_sigma) {
        double rel2 = (fl_minus.slope_se * fl_minus.slope_se + fm_minus.slope_se * fm_minus.slope_se) /
                          (deficit * deficit) +
                      (fm_zero.slope_se * fm_zero.slope_se + fl_zero.slope_se * fl_zero.slope_se) /
                          (excess * excess);
        out.sigma = out.kappa * std::sqrt(rel2);
    } else {
        out.sigma = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

KappaSummary summarize_kappas(const std::vector<KappaEstimate>& estimates) {
    KappaSummary s;
    std::vector<double> k;
    double wsum = 0, wk = 0;
    for (const auto& e : estimates) {
        if (!e.identifiable) continue;
        k.push_back(e.kappa);
        if (e.sigma > 0 && std::isfinite(e.sigma)) {
            double w = 1.0 / (e.sigma * e.sigma);
            wsum += w;
            wk += w * e.kappa;
        }
    }
    s.count = k.size();
    if (k.empty()) throw InvalidArgument("summarize_kappas: no identifiable estimates");
    double mean = 0;
    for (double v : k) mean += v;
    mean /= static_cast<double>(k.size());
    double ss = 0;
    for (double v : k) ss += (v - mean) * (v - mean);
    s.mean = mean;
    s.sd = k.size() > 1 ? std::sqrt(ss / static_cast<double>(k.size() - 1)) : 0.0;
    if (wsum > 0) {
        s.weighted_mean = wk / wsum;
        s.weighted_se = std::sqrt(1.0 / wsum);
    } else {
        s.weighted_mean = std::numeric_limits<double>::quiet_NaN();
        s.weighted_se = std::numeric_limits<double>::quiet_NaN();
    }
    return s;
}

RatioMap fit_ratio_map(const std::vector<RatioPoint>& points) {
    if (points.size() < 3) throw InvalidArgument("fit_ratio_map: need at least 3 points");
    std::vector<double> lx, ly, ls;
    fitting::Trace t;
    for (const auto& p : points) {
        if (!(p.x > 0) || !(p.y > 0)) throw InvalidArgument("fit_ratio_map: x and y must be > 0");
        if (!(p.sigma > 0)) throw InvalidArgument("fit_ratio_map: sigma must be > 0");
        lx.push_back(std::log(p.x));
        ly.push_back(std::log(p.y));
        ls.push_back(p.sigma / p.y);
        t.x.push_back(p.x);
        t.y.push_back(p.y);
        t.sigma.push_back(p.sigma);
    }
    LinearFit init;
    try {
        init = weighted_linear_fit(lx, ly, ls);
    } catch (const NumericalError&) {
        throw NumericalError("fit_ratio_map: exponent unidentifiable (all count ratios equal)");
    }

    fitting::Model power_law{"power_law", {"a", "n"}, {}};
    power_law.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                        Eigen::MatrixXd* J) {
        const auto m = static_cast<Eigen::Index>(x.size());
        f.resize(m);
        if (J) J->resize(m, 2);
        for (Eigen::Index i = 0; i < m; ++i) {
            double xi = x[static_cast<std::size_t>(i)];
            double v = std::pow(xi, p[1]);
            f[i] = p[0] * v;
            if (J) {
                (*J)(i, 0) = v;
                (*J)(i, 1) = p[0] * v * std::log(xi);
            }
        }
    };
    fitting::MinimizeOptions opt;
    opt.lower = Eigen::Vector2d(1e-300, 1e-12);
    opt.upper = Eigen::Vector2d(std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity());
    Eigen::Vector2d p0(std::exp(init.intercept), std::max(init.slope, 1e-6));
    fitting::FitResult r = fitting::minimize(power_law, t, p0, opt);
    if (!r.errors_available) throw NumericalError("fit_ratio_map: singular fit");

    RatioMap map;
    map.a = r.values[0];
    map.n = r.values[1];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) map.covariance[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = r.covariance(i, j);
    return map;
}

MappedRatio map_count_ratio(const RatioMap& map, double x) {
    if (!(x > 0)) throw InvalidArgument("map_count_ratio: count ratio must be > 0");
    MappedRatio out;
    double v = std::pow(x, map.n);
    out.value = map.a * v;
    double da = v;
    double dn = out.value * std::log(x);
    const auto& c = map.covariance;
    double var = da * da * c[0][0] + 2.0 * da * dn * c[0][1] + dn * dn * c[1][1];
    out.sigma = std::sqrt(std::max(0.0, var));
    return out;
}

nlohmann::json to_json(const RatioMap& map) {
    return {{"a", map.a},
            {"n", map.n},
            {"covariance",
             {{map.covariance[0][0], map.covariance[0][1]}, {map.covariance[1][0], map.covariance[1][1]}}}};
}

RatioMap ratio_map_from_json(const nlohmann::json& j) {
    RatioMap m;
    try {
        m.a = j.at("a").get<double>();
        m.n = j.at("n").get<double>();
        const auto& c = j.at("covariance");
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t s = 0; s < 2; ++s) m.covariance[r][s] = c.at(r).at(s).get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("ratio map: ") + e.what());
    }
    if (!(m.a > 0) || !(m.n > 0)) throw InvalidArgument("ratio map: a and n must be > 0");
    return m;
}

nlohmann::json to_json(const KappaEstimate& k) {
    return {{"kappa", k.kappa},
            {"sigma", std::isfinite(k.sigma) ? nlohmann::json(k.sigma) : nlohmann::json()},
            {"identifiable", k.identifiable}};
}

}  // namespace nvrelax::calibration
