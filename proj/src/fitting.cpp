#include "nvrelax/fitting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "nvrelax/error.hpp"
#include "nvrelax/io.hpp"

namespace nvrelax::fitting {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd weights_of(const Trace& t) {
    Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(t.size()));
    if (!t.sigma.empty())
        for (std::size_t i = 0; i < t.size(); ++i) w[static_cast<Eigen::Index>(i)] = 1.0 / (t.sigma[i] * t.sigma[i]);
    return w;
}

Eigen::VectorXd as_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double x_span(const Trace& t) {
    auto [lo, hi] = std::minmax_element(t.x.begin(), t.x.end());
    return *hi - *lo;
}

// Inverse of a symmetric positive matrix after Jacobi scaling; false when (near) singular.
bool scaled_inverse(const Eigen::MatrixXd& A, Eigen::MatrixXd& inv) {
    const Eigen::Index k = A.rows();
    if (k == 0) {
        inv.resize(0, 0);
        return true;
    }
    Eigen::VectorXd d(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!(A(i, i) > 0) || !std::isfinite(A(i, i))) return false;
        d[i] = 1.0 / std::sqrt(A(i, i));
    }
    Eigen::MatrixXd S = d.asDiagonal() * A * d.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    if (es.info() != Eigen::Success) return false;
    double lo = es.eigenvalues().minCoeff();
    double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 1e-13 * hi)) return false;
    Eigen::MatrixXd Sinv = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                           es.eigenvectors().transpose();
    inv = d.asDiagonal() * Sinv * d.asDiagonal();
    return true;
}

double wrap_phase(double phi) {
    return phi - 2.0 * std::numbers::pi * std::ceil((phi - std::numbers::pi) / (2.0 * std::numbers::pi));
}

// Reorders parameter groups; perm[i] is the old index of new parameter i.
void permute(FitResult& r, const std::vector<int>& perm) {
    const auto k = static_cast<Eigen::Index>(perm.size());
    Eigen::VectorXd v(k), e(k);
    Eigen::MatrixXd c(k, k);
    std::vector<bool> fixed(perm.size());
    for (Eigen::Index i = 0; i < k; ++i) {
        v[i] = r.values[perm[i]];
        e[i] = r.errors[perm[i]];
        fixed[i] = r.fixed[perm[i]];
        for (Eigen::Index j = 0; j < k; ++j) c(i, j) = r.covariance(perm[i], perm[j]);
    }
    r.values = v;
    r.errors = e;
    r.covariance = c;
    r.fixed = fixed;
}

}  // namespace

void Trace::validate() const {
    if (x.size() != y.size()) throw InvalidArgument("trace: x and y differ in length");
    if (!sigma.empty() && sigma.size() != x.size())
        throw InvalidArgument("trace: sigma and x differ in length");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
            throw InvalidArgument("trace: non-finite data point");
        if (!sigma.empty() && !(sigma[i] > 0 && std::isfinite(sigma[i])))
            throw InvalidArgument("trace: sigma must be finite and > 0");
    }
}

Eigen::VectorXd Model::operator()(const Eigen::VectorXd& p, const std::vector<double>& x) const {
    Eigen::VectorXd f;
    eval(p, x, f, nullptr);
    return f;
}

int FitResult::index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

double FitResult::value(const std::string& name) const {
    int i = index(name);
    if (i < 0) throw InvalidArgument("fit result has no parameter '" + name + "'");
    return values[i];
}

double FitResult::error(const std::string& name) const {
    int i = index(name);
    if (i < 0) throw InvalidArgument("fit result has no parameter '" + name + "'");
    return errors[i];
}

nlohmann::json FitResult::to_json() const {
    nlohmann::json j;
    j["model"] = model;
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < names.size(); ++i) {
        auto k = static_cast<Eigen::Index>(i);
        params.push_back({{"name", names[i]},
                          {"value", values[k]},
                          {"error", std::isfinite(errors[k]) ? nlohmann::json(errors[k]) : nlohmann::json()},
                          {"fixed", static_cast<bool>(fixed[i])}});
    }
    j["parameters"] = params;
    nlohmann::json cov = nlohmann::json::array();
    for (Eigen::Index r = 0; r < covariance.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < covariance.cols(); ++c) {
            double v = covariance(r, c);
            row.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json());
        }
        cov.push_back(row);
    }
    j["covariance"] = cov;
    j["rmse"] = rmse;
    j["chi2"] = chi2;
    j["dof"] = dof;
    j["n_iter"] = n_iter;
    j["converged"] = converged;
    j["errors_available"] = errors_available;
    j["degenerate"] = degenerate;
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [k, v] : derived) d[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
    j["derived"] = d;
    return j;
}

Eigen::VectorXd linear_least_squares(const Eigen::MatrixXd& X, const std::vector<double>& y,
                                     const std::vector<double>& sigma, Eigen::MatrixXd* covariance) {
    const Eigen::Index n = X.rows();
    if (static_cast<std::size_t>(n) != y.size()) throw InvalidArgument("linear fit: size mismatch");
    Eigen::VectorXd s = Eigen::VectorXd::Ones(n);
    if (!sigma.empty())
        for (Eigen::Index i = 0; i < n; ++i) s[i] = 1.0 / sigma[static_cast<std::size_t>(i)];
    Eigen::MatrixXd Xw = s.asDiagonal() * X;
    Eigen::VectorXd yw = s.cwiseProduct(as_vector(y));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    if (qr.rank() < X.cols()) throw NumericalError("linear fit: design matrix is rank deficient");
    Eigen::VectorXd b = qr.solve(yw);
    if (covariance) {
        Eigen::MatrixXd inv;
        if (!scaled_inverse(Xw.transpose() * Xw, inv))
            throw NumericalError("linear fit: normal matrix is singular");
        *covariance = inv;
    }
    return b;
}

FitResult minimize(const Model& model, const Trace& data, const Eigen::VectorXd& init,
                   const MinimizeOptions& options) {
    data.validate();
    const Eigen::Index k = static_cast<Eigen::Index>(model.names.size());
    if (init.size() != k) throw InvalidArgument("minimize: init has the wrong number of parameters");
    std::vector<bool> fixed = options.fixed.empty() ? std::vector<bool>(static_cast<std::size_t>(k), false)
                                                    : options.fixed;
    if (static_cast<Eigen::Index>(fixed.size()) != k) throw InvalidArgument("minimize: fixed mask size");
    Eigen::VectorXd lower = options.lower.size() ? options.lower
                                                 : Eigen::VectorXd::Constant(k, -std::numeric_limits<double>::infinity());
    Eigen::VectorXd upper = options.upper.size() ? options.upper
                                                 : Eigen::VectorXd::Constant(k, std::numeric_limits<double>::infinity());
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!std::isfinite(init[i])) throw InvalidArgument("minimize: non-finite initial value for " + model.names[static_cast<std::size_t>(i)]);
        if (init[i] < lower[i] || init[i] > upper[i])
            throw InvalidArgument("minimize: initial value outside bounds for " + model.names[static_cast<std::size_t>(i)]);
    }
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < k; ++i)
        if (!fixed[static_cast<std::size_t>(i)]) free.push_back(i);
    const Eigen::Index m = static_cast<Eigen::Index>(free.size());
    const Eigen::Index n = static_cast<Eigen::Index>(data.size());
    if (n < m) throw InvalidArgument("minimize: fewer data points than free parameters");

    const Eigen::VectorXd w = weights_of(data);
    const Eigen::VectorXd y = as_vector(data.y);

    Eigen::VectorXd p = init;
    Eigen::VectorXd f;
    Eigen::MatrixXd J;

    auto cost_at = [&](const Eigen::VectorXd& q, Eigen::VectorXd& fq) {
        model.eval(q, data.x, fq, nullptr);
        double c = (y - fq).cwiseAbs2().dot(w);
        return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
    };

    model.eval(p, data.x, f, &J);
    double cost = (y - f).cwiseAbs2().dot(w);
    if (!std::isfinite(cost)) throw NumericalError("minimize: model is not finite at the initial point");

    double lambda = 1e-3;
    int iter = 0;
    bool converged = (cost == 0.0) || m == 0;
    Eigen::VectorXd ftrial;
    while (!converged && iter < options.max_iter) {
        ++iter;
        Eigen::MatrixXd Jf(n, m);
        for (Eigen::Index c = 0; c < m; ++c) Jf.col(c) = J.col(free[static_cast<std::size_t>(c)]);
        const Eigen::VectorXd r = y - f;
        const Eigen::MatrixXd A = Jf.transpose() * w.asDiagonal() * Jf;
        const Eigen::VectorXd g = Jf.transpose() * w.cwiseProduct(r);
        const double dmax = A.diagonal().maxCoeff();

        bool accepted = false;
        while (!accepted) {
            Eigen::MatrixXd M = A;
            for (Eigen::Index i = 0; i < m; ++i) M(i, i) += lambda * std::max(A(i, i), 1e-30 * dmax);
            Eigen::VectorXd delta = M.ldlt().solve(g);
            Eigen::VectorXd trial = p;
            for (Eigen::Index i = 0; i < m; ++i) {
                Eigen::Index j = free[static_cast<std::size_t>(i)];
                trial[j] = std::clamp(p[j] + delta[i], lower[j], upper[j]);
            }
            bool small = true;
            for (Eigen::Index i = 0; i < m; ++i) {
                Eigen::Index j = free[static_cast<std::size_t>(i)];
                if (std::abs(trial[j] - p[j]) > options.xtol * (std::abs(p[j]) + options.xtol)) small = false;
            }
            double c = cost_at(trial, ftrial);
            if (c < cost) {
                p = trial;
                cost = c;
                lambda = std::max(lambda / 10.0, 1e-12);
                accepted = true;
                model.eval(p, data.x, f, &J);
                if (small) converged = true;
            } else if (small && lambda <= 1e-3) {
                // Gauss-Newton step is already negligible: at a minimum.
                converged = true;
                break;
            } else {
                lambda *= 10.0;
                if (lambda > 1e16) {
                    converged = true;  // no descent direction left at working precision
                    break;
                }
            }
        }
    }

    FitResult out;
    out.model = model.id;
    out.names = model.names;
    out.values = p;
    out.fixed = fixed;
    out.n_iter = iter;
    out.converged = converged;
    out.chi2 = cost;
    out.dof = static_cast<int>(n - m);
    out.rmse = std::sqrt((y - f).squaredNorm() / static_cast<double>(n));
    out.covariance = Eigen::MatrixXd::Zero(k, k);
    out.errors = Eigen::VectorXd::Zero(k);

    Eigen::MatrixXd Jf(n, m);
    for (Eigen::Index c = 0; c < m; ++c) Jf.col(c) = J.col(free[static_cast<std::size_t>(c)]);
    Eigen::MatrixXd inv;
    if (scaled_inverse(Jf.transpose() * w.asDiagonal() * Jf, inv)) {
        double s2 = n > m ? cost / static_cast<double>(n - m) : 1.0;
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                out.covariance(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]) = inv(a, b) * s2;
        for (Eigen::Index i = 0; i < k; ++i) out.errors[i] = std::sqrt(std::max(0.0, out.covariance(i, i)));
    } else {
        out.errors_available = false;
        for (Eigen::Index i : free) {
            out.errors[i] = kNaN;
            for (Eigen::Index j : free) out.covariance(i, j) = kNaN;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Models

Model monoexp_model() {
    Model m{"monoexp", {"A", "T", "d"}, {}};
    m.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->resize(n, 3);
        for (Eigen::Index i = 0; i < n; ++i) {
            double t = x[static_cast<std::size_t>(i)];
            double e = std::exp(-t / p[1]);
            f[i] = p[0] * e + p[2];
            if (J) {
                (*J)(i, 0) = e;
                (*J)(i, 1) = p[0] * e * t / (p[1] * p[1]);
                (*J)(i, 2) = 1.0;
            }
        }
    };
    return m;
}

Model biexp_model() {
    Model m{"biexp", {"A", "T_R1", "B", "T_R2", "d"}, {}};
    m.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->resize(n, 5);
        for (Eigen::Index i = 0; i < n; ++i) {
            double t = x[static_cast<std::size_t>(i)];
            double e1 = std::exp(-t / p[1]);
            double e2 = std::exp(-t / p[3]);
            f[i] = p[0] * e1 + p[2] * e2 + p[4];
            if (J) {
                (*J)(i, 0) = e1;
                (*J)(i, 1) = p[0] * e1 * t / (p[1] * p[1]);
                (*J)(i, 2) = e2;
                (*J)(i, 3) = p[2] * e2 * t / (p[3] * p[3]);
                (*J)(i, 4) = 1.0;
            }
        }
    };
    return m;
}

Model triexp_model() {
    Model m{"triexp_fixed", {"A", "T_R1", "B", "T_R2", "C", "T1", "d"}, {}};
    m.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->resize(n, 7);
        for (Eigen::Index i = 0; i < n; ++i) {
            double t = x[static_cast<std::size_t>(i)];
            double e1 = std::exp(-t / p[1]);
            double e2 = std::exp(-t / p[3]);
            double e3 = std::exp(-t / p[5]);
            f[i] = -p[0] * e1 - p[2] * e2 + p[4] * e3 + p[6];
            if (J) {
                (*J)(i, 0) = -e1;
                (*J)(i, 1) = -p[0] * e1 * t / (p[1] * p[1]);
                (*J)(i, 2) = -e2;
                (*J)(i, 3) = -p[2] * e2 * t / (p[3] * p[3]);
                (*J)(i, 4) = e3;
                (*J)(i, 5) = p[4] * e3 * t / (p[5] * p[5]);
                (*J)(i, 6) = 1.0;
            }
        }
    };
    return m;
}

Model lorentzian_sum_model(int n_peaks) {
    if (n_peaks < 1) throw InvalidArgument("lorentzian_sum_model: n_peaks must be >= 1");
    Model m;
    m.id = "lorentzian_sum";
    m.names.push_back("c0");
    for (int i = 0; i < n_peaks; ++i) {
        m.names.push_back("a" + std::to_string(i));
        m.names.push_back("f" + std::to_string(i));
        m.names.push_back("w" + std::to_string(i));
    }
    m.eval = [n_peaks](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                       Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->setZero(n, 1 + 3 * n_peaks);
        for (Eigen::Index i = 0; i < n; ++i) {
            double v = p[0];
            if (J) (*J)(i, 0) = 1.0;
            for (int k = 0; k < n_peaks; ++k) {
                double a = p[1 + 3 * k], c = p[2 + 3 * k], h = 0.5 * p[3 + 3 * k];
                double u = x[static_cast<std::size_t>(i)] - c;
                double den = u * u + h * h;
                v -= a * h * h / den;
                if (J) {
                    (*J)(i, 1 + 3 * k) = -h * h / den;
                    (*J)(i, 2 + 3 * k) = -2.0 * a * h * h * u / (den * den);
                    (*J)(i, 3 + 3 * k) = -a * h * u * u / (den * den);
                }
            }
            f[i] = v;
        }
    };
    return m;
}

Model rabi_model() {
    Model m{"rabi", {"A", "T2", "Omega", "Phi", "c"}, {}};
    m.eval = [](const Eigen::VectorXd& p, const std::vector<double>& x, Eigen::VectorXd& f,
                Eigen::MatrixXd* J) {
        const auto n = static_cast<Eigen::Index>(x.size());
        f.resize(n);
        if (J) J->resize(n, 5);
        for (Eigen::Index i = 0; i < n; ++i) {
            double t = x[static_cast<std::size_t>(i)];
            double e = std::exp(-t / p[1]);
            double arg = p[2] * t + p[3];
            double co = std::cos(arg), si = std::sin(arg);
            f[i] = p[0] * e * co + p[4];
            if (J) {
                (*J)(i, 0) = e * co;
                (*J)(i, 1) = p[0] * e * co * t / (p[1] * p[1]);
                (*J)(i, 2) = -p[0] * e * si * t;
                (*J)(i, 3) = -p[0] * e * si;
                (*J)(i, 4) = 1.0;
            }
        }
    };
    return m;
}

Model model_for(const FitResult& fit) {
    if (fit.model == "monoexp") return monoexp_model();
    if (fit.model == "biexp") return biexp_model();
    if (fit.model == "triexp_fixed") return triexp_model();
    if (fit.model == "rabi") return rabi_model();
    if (fit.model == "lorentzian_sum")
        return lorentzian_sum_model((static_cast<int>(fit.names.size()) - 1) / 3);
    throw InvalidArgument("unknown model id '" + fit.model + "'");
}

std::vector<double> evaluate(const FitResult& fit, const std::vector<double>& x) {
    Eigen::VectorXd f = model_for(fit)(fit.values, x);
    return {f.data(), f.data() + f.size()};
}

// ---------------------------------------------------------------------------------------------
// Specific fits

namespace {

FitResult best_of(const std::vector<FitResult>& fits) {
    if (fits.empty()) throw NumericalError("no fit start succeeded");
    const FitResult* best = &fits.front();
    for (const auto& f : fits)
        if (f.chi2 < best->chi2) best = &f;
    return *best;
}

FitResult monoexp_from(const Trace& t, double tau, const Eigen::VectorXd& lower,
                       const Eigen::VectorXd& upper) {
    const auto n = static_cast<Eigen::Index>(t.size());
    Eigen::MatrixXd X(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        X(i, 0) = std::exp(-t.x[static_cast<std::size_t>(i)] / tau);
        X(i, 1) = 1.0;
    }
    Eigen::VectorXd ad = linear_least_squares(X, t.y, t.sigma);
    MinimizeOptions opt;
    opt.lower = lower;
    opt.upper = upper;
    return minimize(monoexp_model(), t, Eigen::Vector3d(ad[0], tau, ad[1]), opt);
}

}  // namespace

FitResult fit_monoexp(const Trace& trace) {
    trace.validate();
    if (trace.size() < 4) throw InvalidArgument("fit_monoexp: need at least 4 points");
    const double span = x_span(trace);
    if (!(span > 0)) throw InvalidArgument("fit_monoexp: x values must not all coincide");

    std::vector<double> starts;
    // Log-linear estimate on the distance to the asymptote side.
    {
        bool decaying = trace.y.front() >= trace.y.back();
        double ref = decaying ? *std::min_element(trace.y.begin(), trace.y.end())
                              : *std::max_element(trace.y.begin(), trace.y.end());
        std::vector<double> lx, ly;
        for (std::size_t i = 0; i < trace.size(); ++i) {
            double v = decaying ? trace.y[i] - ref : ref - trace.y[i];
            if (v > 0) {
                lx.push_back(trace.x[i]);
                ly.push_back(std::log(v));
            }
        }
        if (lx.size() >= 2) {
            Eigen::MatrixXd X(static_cast<Eigen::Index>(lx.size()), 2);
            for (std::size_t i = 0; i < lx.size(); ++i) {
                X(static_cast<Eigen::Index>(i), 0) = lx[i];
                X(static_cast<Eigen::Index>(i), 1) = 1.0;
            }
            try {
                Eigen::VectorXd b = linear_least_squares(X, ly, {});
                if (b[0] < 0) starts.push_back(-1.0 / b[0]);
            } catch (const NumericalError&) {
            }
        }
    }
    for (double s : {0.03, 0.1, 0.3, 1.0, 3.0}) starts.push_back(s * span);

    Eigen::VectorXd lower(3);
    const double inf = std::numeric_limits<double>::infinity();
    lower << -inf, 1e-9 * span, -inf;
    // Far beyond the sampled span a decay is indistinguishable from a straight line.
    Eigen::VectorXd upper(3);
    upper << inf, 10.0 * span, inf;
    std::vector<FitResult> fits;
    for (double tau : starts) {
        try {
            fits.push_back(monoexp_from(trace, std::clamp(tau, 2e-9 * span, 10.0 * span), lower, upper));
        } catch (const NumericalError&) {
        }
    }
    return best_of(fits);
}

FitResult fit_biexp(const Trace& trace) {
    trace.validate();
    if (trace.size() < 6) throw InvalidArgument("fit_biexp: need at least 6 points");
    double xmin = std::numeric_limits<double>::infinity(), xmax = 0;
    for (double x : trace.x) {
        if (x > 0) xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
    }
    if (!(xmax >= 10.0 * xmin)) throw InvalidArgument("fit_biexp: x must span at least one decade");

    const std::vector<double> grid = {1e-5, 1e-4, 1e-3, 1e-2};
    const auto n = static_cast<Eigen::Index>(trace.size());
    Eigen::VectorXd lower(5);
    const double inf = std::numeric_limits<double>::infinity();
    lower << -inf, 1e-12, -inf, 1e-12, -inf;
    MinimizeOptions opt;
    opt.lower = lower;

    std::vector<FitResult> fits;
    for (std::size_t a = 0; a < grid.size(); ++a) {
        for (std::size_t b = a + 1; b < grid.size(); ++b) {
            Eigen::MatrixXd X(n, 3);
            for (Eigen::Index i = 0; i < n; ++i) {
                double t = trace.x[static_cast<std::size_t>(i)];
                X(i, 0) = std::exp(-t / grid[a]);
                X(i, 1) = std::exp(-t / grid[b]);
                X(i, 2) = 1.0;
            }
            try {
                Eigen::VectorXd c = linear_least_squares(X, trace.y, trace.sigma);
                Eigen::VectorXd init(5);
                init << c[0], grid[a], c[1], grid[b], c[2];
                fits.push_back(minimize(biexp_model(), trace, init, opt));
            } catch (const NumericalError&) {
            }
        }
    }
    FitResult best = best_of(fits);
    if (best.values[1] > best.values[3]) permute(best, {2, 3, 0, 1, 4});

    double ratio = best.values[3] / best.values[1];
    bool amp_zero = best.errors_available &&
                    (std::abs(best.values[0]) <= best.errors[0] || std::abs(best.values[2]) <= best.errors[2]);
    best.degenerate = !best.errors_available || amp_zero || ratio < 1.01;
    return best;
}

FitResult fit_triexp_fixed(const Trace& trace, double t_r1, double t_r2, double t1) {
    trace.validate();
    if (!(t_r1 > 0 && t_r2 > 0 && t1 > 0)) throw InvalidArgument("fit_triexp_fixed: time constants must be > 0");
    if (t_r1 == t_r2 || t_r1 == t1 || t_r2 == t1)
        throw InvalidArgument("fit_triexp_fixed: time constants must be distinct");
    if (trace.size() < 4) throw InvalidArgument("fit_triexp_fixed: need at least 4 points");

    const auto n = static_cast<Eigen::Index>(trace.size());
    Eigen::MatrixXd full(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
        double t = trace.x[static_cast<std::size_t>(i)];
        full(i, 0) = -std::exp(-t / t_r1);
        full(i, 1) = -std::exp(-t / t_r2);
        full(i, 2) = std::exp(-t / t1);
        full(i, 3) = 1.0;
    }
    const Eigen::VectorXd w = weights_of(trace);
    const Eigen::VectorXd y = as_vector(trace.y);

    // Non-negative A, B, C: enumerate which amplitudes are free, keep the best feasible set.
    double best_cost = std::numeric_limits<double>::infinity();
    Eigen::Vector4d best_coef = Eigen::Vector4d::Zero();
    std::vector<int> best_cols;
    for (int mask = 0; mask < 8; ++mask) {
        std::vector<int> cols;
        for (int c = 0; c < 3; ++c)
            if (mask & (1 << c)) cols.push_back(c);
        cols.push_back(3);
        if (static_cast<Eigen::Index>(cols.size()) > n) continue;
        Eigen::MatrixXd X(n, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c) X.col(static_cast<Eigen::Index>(c)) = full.col(cols[c]);
        Eigen::VectorXd b;
        try {
            b = linear_least_squares(X, trace.y, trace.sigma);
        } catch (const NumericalError&) {
            continue;
        }
        bool feasible = true;
        for (std::size_t c = 0; c + 1 < cols.size(); ++c)
            if (b[static_cast<Eigen::Index>(c)] < 0) feasible = false;
        if (!feasible) continue;
        double cost = (y - X * b).cwiseAbs2().dot(w);
        if (cost < best_cost * (1 - 1e-14)) {
            best_cost = cost;
            best_coef.setZero();
            for (std::size_t c = 0; c < cols.size(); ++c) best_coef[cols[c]] = b[static_cast<Eigen::Index>(c)];
            best_cols = cols;
        }
    }
    if (best_cols.empty()) throw NumericalError("fit_triexp_fixed: no feasible solution");

    FitResult out;
    out.model = "triexp_fixed";
    out.names = {"A", "T_R1", "B", "T_R2", "C", "T1", "d"};
    out.values.resize(7);
    out.values << best_coef[0], t_r1, best_coef[1], t_r2, best_coef[2], t1, best_coef[3];
    out.fixed = {false, true, false, true, false, true, false};
    out.converged = true;
    out.n_iter = 0;
    out.chi2 = best_cost;
    const Eigen::VectorXd fit = full * best_coef;
    out.rmse = std::sqrt((y - fit).squaredNorm() / static_cast<double>(n));
    out.dof = static_cast<int>(n - static_cast<Eigen::Index>(best_cols.size()));
    out.covariance = Eigen::MatrixXd::Zero(7, 7);
    out.errors = Eigen::VectorXd::Zero(7);

    const int slot[4] = {0, 2, 4, 6};
    Eigen::MatrixXd X(n, static_cast<Eigen::Index>(best_cols.size()));
    for (std::size_t c = 0; c < best_cols.size(); ++c) X.col(static_cast<Eigen::Index>(c)) = full.col(best_cols[c]);
    Eigen::MatrixXd inv;
    if (scaled_inverse(X.transpose() * w.asDiagonal() * X, inv)) {
        double s2 = out.dof > 0 ? best_cost / out.dof : 1.0;
        for (std::size_t a = 0; a < best_cols.size(); ++a)
            for (std::size_t b = 0; b < best_cols.size(); ++b)
                out.covariance(slot[best_cols[a]], slot[best_cols[b]]) =
                    inv(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * s2;
        for (int i = 0; i < 7; ++i) out.errors[i] = std::sqrt(std::max(0.0, out.covariance(i, i)));
    } else {
        out.errors_available = false;
        for (int c : best_cols) out.errors[slot[c]] = kNaN;
    }
    out.derived["recharge_amplitude"] = out.values[0] + out.values[2];
    out.derived["spin_amplitude"] = out.values[4];
    return out;
}

FitResult fit_lorentzian_sum(const Trace& trace, int n_peaks) {
    trace.validate();
    if (n_peaks < 1) throw InvalidArgument("fit_lorentzian_sum: n_peaks must be >= 1");
    const std::size_t n = trace.size();
    if (n < static_cast<std::size_t>(1 + 3 * n_peaks))
        throw InvalidArgument("fit_lorentzian_sum: too few points for the number of peaks");
    for (std::size_t i = 1; i < n; ++i)
        if (!(trace.x[i] > trace.x[i - 1])) throw InvalidArgument("fit_lorentzian_sum: x must be increasing");

    // Moving-average smoothing, then local minima ranked by depth.
    const std::size_t half = std::max<std::size_t>(1, n / 200);
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t a = i >= half ? i - half : 0, b = std::min(n - 1, i + half);
        double acc = 0;
        for (std::size_t j = a; j <= b; ++j) acc += trace.y[j];
        ys[i] = acc / static_cast<double>(b - a + 1);
    }
    std::vector<double> sorted = ys;
    std::sort(sorted.begin(), sorted.end());
    const double baseline = sorted[static_cast<std::size_t>(0.9 * static_cast<double>(n - 1))];

    std::vector<std::size_t> minima;
    for (std::size_t i = 1; i + 1 < n; ++i)
        if (ys[i] <= ys[i - 1] && ys[i] < ys[i + 1] && ys[i] < baseline) minima.push_back(i);
    std::stable_sort(minima.begin(), minima.end(), [&](std::size_t a, std::size_t b) { return ys[a] < ys[b]; });

    struct Peak {
        double depth, center, width;
    };
    std::vector<Peak> peaks;
    std::vector<bool> taken(n, false);
    for (std::size_t i : minima) {
        if (static_cast<int>(peaks.size()) == n_peaks) break;
        if (taken[i]) continue;
        double depth = baseline - ys[i];
        double halfway = baseline - 0.5 * depth;
        std::size_t lo = i, hi = i;
        while (lo > 0 && ys[lo - 1] < halfway) --lo;
        while (hi + 1 < n && ys[hi + 1] < halfway) ++hi;
        double width = std::max(trace.x[std::min(hi + 1, n - 1)] - trace.x[lo > 0 ? lo - 1 : 0],
                                2.0 * (trace.x[1] - trace.x[0]));
        // Exclude the dip's own half-maximum region from later picks.
        std::size_t l2 = lo > 0 ? lo - 1 : 0, h2 = std::min(n - 1, hi + 1);
        for (std::size_t j = l2; j <= h2; ++j) taken[j] = true;
        peaks.push_back({depth, trace.x[i], width});
    }
    if (static_cast<int>(peaks.size()) < n_peaks)
        throw NumericalError(io::format("fit_lorentzian_sum: found %zu dips, expected %d", peaks.size(), n_peaks));

    const Eigen::Index k = 1 + 3 * n_peaks;
    Eigen::VectorXd init(k), lower(k), upper(k);
    const double span = trace.x.back() - trace.x.front();
    init[0] = baseline;
    lower[0] = -std::numeric_limits<double>::infinity();
    upper[0] = std::numeric_limits<double>::infinity();
    for (int p = 0; p < n_peaks; ++p) {
        const auto& pk = peaks[static_cast<std::size_t>(p)];
        init[1 + 3 * p] = pk.depth;
        init[2 + 3 * p] = pk.center;
        init[3 + 3 * p] = pk.width;
        lower[1 + 3 * p] = 0.0;
        upper[1 + 3 * p] = std::numeric_limits<double>::infinity();
        lower[2 + 3 * p] = trace.x.front();
        upper[2 + 3 * p] = trace.x.back();
        lower[3 + 3 * p] = 1e-6 * span;
        upper[3 + 3 * p] = span;
    }
    MinimizeOptions opt;
    opt.lower = lower;
    opt.upper = upper;
    FitResult r = minimize(lorentzian_sum_model(n_peaks), trace, init, opt);

    std::vector<int> order(static_cast<std::size_t>(n_peaks));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return r.values[2 + 3 * a] < r.values[2 + 3 * b]; });
    std::vector<int> perm = {0};
    for (int p : order)
        for (int c = 1; c <= 3; ++c) perm.push_back(3 * p + c);
    permute(r, perm);
    if (n_peaks >= 2) {
        const auto last = static_cast<Eigen::Index>(3 * (n_peaks - 1) + 2);
        r.derived["outer_splitting"] = r.values[last] - r.values[2];
        r.derived["outer_splitting_error"] = std::hypot(r.errors[last], r.errors[2]);
    }
    return r;
}

double field_from_splitting(double splitting, double projection) {
    if (!(splitting >= 0)) throw InvalidArgument("field_from_splitting: splitting must be >= 0");
    if (!(projection > 0 && projection <= 1)) throw InvalidArgument("field_from_splitting: projection must be in (0, 1]");
    return splitting / (2.0 * kNvGyromagneticRatio * projection);
}

FitResult fit_rabi(const Trace& trace) {
    trace.validate();
    const std::size_t n = trace.size();
    if (n < 8) throw InvalidArgument("fit_rabi: need at least 8 points");
    const double span = x_span(trace);
    if (!(span > 0)) throw InvalidArgument("fit_rabi: x values must not all coincide");

    double mean = std::accumulate(trace.y.begin(), trace.y.end(), 0.0) / static_cast<double>(n);
    std::vector<double> xs = trace.x;
    std::sort(xs.begin(), xs.end());
    std::vector<double> dx;
    for (std::size_t i = 1; i < n; ++i)
        if (xs[i] > xs[i - 1]) dx.push_back(xs[i] - xs[i - 1]);
    std::nth_element(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(dx.size() / 2), dx.end());
    const double step = dx[dx.size() / 2];

    // Peak of the discrete spectrum of the mean-subtracted trace.
    const double wmin = std::numbers::pi / span;
    const double wmax = std::numbers::pi / step;
    const std::size_t nw = 8 * n;
    double best_w = wmin, best_p = -1;
    for (std::size_t j = 0; j < nw; ++j) {
        double om = wmin + (wmax - wmin) * static_cast<double>(j) / static_cast<double>(nw - 1);
        double re = 0, im = 0;
        for (std::size_t i = 0; i < n; ++i) {
            re += (trace.y[i] - mean) * std::cos(om * trace.x[i]);
            im -= (trace.y[i] - mean) * std::sin(om * trace.x[i]);
        }
        double pw = re * re + im * im;
        if (pw > best_p) {
            best_p = pw;
            best_w = om;
        }
    }
    if (best_w * span / (2.0 * std::numbers::pi) < 2.0)
        throw InvalidArgument("fit_rabi: trace must cover at least two oscillation periods");

    const double inf = std::numeric_limits<double>::infinity();
    Eigen::VectorXd lower(5), upper(5);
    lower << -inf, 1e-6 * span, 0.0, -inf, -inf;
    upper << inf, inf, inf, inf, inf;
    MinimizeOptions opt;
    opt.lower = lower;
    opt.upper = upper;

    std::vector<FitResult> fits;
    for (double wscale : {1.0, 0.9, 1.1}) {
        for (double t2 : {10.0 * span, span / 3.0, 2.0 * std::numbers::pi / best_w}) {
            double om = best_w * wscale;
            const auto m = static_cast<Eigen::Index>(n);
            Eigen::MatrixXd X(m, 3);
            for (Eigen::Index i = 0; i < m; ++i) {
                double t = trace.x[static_cast<std::size_t>(i)];
                double e = std::exp(-t / t2);
                X(i, 0) = e * std::cos(om * t);
                X(i, 1) = e * std::sin(om * t);
                X(i, 2) = 1.0;
            }
            try {
                Eigen::VectorXd b = linear_least_squares(X, trace.y, trace.sigma);
                Eigen::VectorXd init(5);
                init << std::hypot(b[0], b[1]), t2, om, std::atan2(-b[1], b[0]), b[2];
                fits.push_back(minimize(rabi_model(), trace, init, opt));
            } catch (const NumericalError&) {
            }
        }
    }
    FitResult r = best_of(fits);
    if (r.values[0] < 0) {
        r.values[0] = -r.values[0];
        r.values[3] += std::numbers::pi;
        for (Eigen::Index j = 0; j < 5; ++j) {
            if (j == 0) continue;
            r.covariance(0, j) = -r.covariance(0, j);
            r.covariance(j, 0) = -r.covariance(j, 0);
        }
    }
    r.values[3] = wrap_phase(r.values[3]);
    const double om = r.values[2];
    r.derived["pi_time"] = std::numbers::pi / om;
    r.derived["pi_time_error"] = std::numbers::pi * r.errors[2] / (om * om);
    return r;
}

double snr(const Trace& trace, const FitResult& fit) {
    trace.validate();
    int off = fit.index("d");
    if (off < 0) off = fit.index("c");
    if (off < 0) off = fit.index("c0");
    if (off < 0) throw InvalidArgument("snr: model has no offset parameter");
    std::vector<double> x = trace.x;
    std::sort(x.begin(), x.end());
    std::vector<double> f = evaluate(fit, x);
    for (double& v : f) v -= fit.values[off];
    double contrast = 0;
    for (std::size_t i = 1; i < x.size(); ++i) contrast += 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
    if (contrast == 0) return 0.0;
    if (fit.rmse == 0) return contrast > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    return contrast / fit.rmse;
}

Trace read_trace_csv(const std::string& path) {
    auto table = io::read_csv(path);
    int xc = table.column("x"), yc = table.column("y"), sc = table.column("sigma");
    if (xc < 0 || yc < 0) throw InvalidArgument(path + ": expected columns x,y[,sigma]");
    Trace t;
    for (const auto& row : table.rows) {
        t.x.push_back(io::parse_double(row[static_cast<std::size_t>(xc)]));
        t.y.push_back(io::parse_double(row[static_cast<std::size_t>(yc)]));
        if (sc >= 0) t.sigma.push_back(io::parse_double(row[static_cast<std::size_t>(sc)]));
    }
    t.validate();
    return t;
}

}  // namespace nvrelax::fitting
