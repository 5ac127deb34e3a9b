#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace nvrelax::fitting {

/// Data to be fitted. An empty sigma means unit weights; otherwise weights are 1/sigma^2.
struct Trace {
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> sigma;

    [[nodiscard]] std::size_t size() const { return x.size(); }
    void validate() const;
};

/// A parametric model y = f(x; p) with analytic Jacobian.
struct Model {
    std::string id;
    std::vector<std::string> names;
    /// Fills f (size x.size()) and, when J is non-null, J (x.size() by names.size()).
    std::function<void(const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                       Eigen::MatrixXd* J)>
        eval;

    [[nodiscard]] Eigen::VectorXd operator()(const Eigen::VectorXd& p,
                                             const std::vector<double>& x) const;
};

struct FitResult {
    std::string model;
    std::vector<std::string> names;
    Eigen::VectorXd values;
    Eigen::VectorXd errors;      ///< NaN when the covariance is unavailable
    std::vector<bool> fixed;
    Eigen::MatrixXd covariance;
    double rmse = 0;             ///< unweighted residual RMS
    double chi2 = 0;             ///< weighted residual sum of squares
    int dof = 0;
    int n_iter = 0;
    bool converged = false;
    bool errors_available = true;
    bool degenerate = false;     ///< nested-model degeneracy detected (biexp)
    std::map<std::string, double> derived;

    [[nodiscard]] double value(const std::string& name) const;
    [[nodiscard]] double error(const std::string& name) const;
    [[nodiscard]] int index(const std::string& name) const;  ///< -1 if absent
    [[nodiscard]] nlohmann::json to_json() const;
};

struct MinimizeOptions {
    int max_iter = 200;
    double xtol = 1e-10;
    std::vector<bool> fixed;     ///< empty: all free
    Eigen::VectorXd lower;       ///< empty: unbounded
    Eigen::VectorXd upper;
};

/// Levenberg-Marquardt with box bounds and a fixed-parameter mask.
FitResult minimize(const Model& model, const Trace& data, const Eigen::VectorXd& init,
                   const MinimizeOptions& options = {});

// Model factories. Parameter order is given in each comment.
Model monoexp_model();                                       ///< A, T, d
Model biexp_model();                                         ///< A, T_R1, B, T_R2, d
Model triexp_model();                                        ///< A, T_R1, B, T_R2, C, T1, d
Model lorentzian_sum_model(int n_peaks);                     ///< c0, then a_i, f_i, w_i
Model rabi_model();                                          ///< A, T2, Omega, Phi, c
/// Rebuilds the model a FitResult came from.
Model model_for(const FitResult& fit);

FitResult fit_monoexp(const Trace& trace);
FitResult fit_biexp(const Trace& trace);
FitResult fit_triexp_fixed(const Trace& trace, double t_r1, double t_r2, double t1);
FitResult fit_lorentzian_sum(const Trace& trace, int n_peaks = 8);
FitResult fit_rabi(const Trace& trace);

/// NV electron gyromagnetic ratio [Hz/T].
inline constexpr double kNvGyromagneticRatio = 28.0249514242e9;

/// Field magnitude [T] from the outermost ODMR pair splitting [Hz], first order in B:
/// f = D +- gamma * B * projection, with projection = |cos| of the angle to the NV axis.
double field_from_splitting(double splitting, double projection = 1.0);

/// Area of (fit - offset) over the trace's x range divided by the fit rmse.
double snr(const Trace& trace, const FitResult& fit);

/// Fitted curve at the given abscissae.
std::vector<double> evaluate(const FitResult& fit, const std::vector<double>& x);

/// Closed-form weighted linear least squares y ~ X b (weights 1/sigma^2, or unit when empty).
/// Returns the coefficients; covariance (absolute sigma) if requested.
Eigen::VectorXd linear_least_squares(const Eigen::MatrixXd& X, const std::vector<double>& y,
                                     const std::vector<double>& sigma,
                                     Eigen::MatrixXd* covariance = nullptr);

/// CSV `x,y,sigma` (sigma column optional).
Trace read_trace_csv(const std::string& path);

}  // namespace nvrelax::fitting
