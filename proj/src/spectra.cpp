#include "nvrelax/spectra.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

#include "nvrelax/error.hpp"
#include "nvrelax/io.hpp"

namespace nvrelax::spectra {

namespace {

void require_same_grid(const Spectrum& a, const Spectrum& b, const char* what) {
    if (!same_grid(a, b)) throw InvalidArgument(std::string(what) + ": spectra do not share a grid");
}

double interpolate(const Spectrum& s, double x) {
    const auto& w = s.wavelengths;
    if (x < w.front() || x > w.back()) return 0.0;
    auto it = std::upper_bound(w.begin(), w.end(), x);
    if (it == w.end()) return s.counts.back();
    std::size_t j = static_cast<std::size_t>(it - w.begin());
    double t = (x - w[j - 1]) / (w[j] - w[j - 1]);
    return s.counts[j - 1] + t * (s.counts[j] - s.counts[j - 1]);
}

// Trapezoidal area of the piecewise-linear spectrum restricted to [lo, hi].
double partial_area(const Spectrum& s, double lo, double hi) {
    const auto& w = s.wavelengths;
    lo = std::max(lo, w.front());
    hi = std::min(hi, w.back());
    if (hi <= lo) return 0.0;
    double acc = 0;
    for (std::size_t j = 1; j < w.size(); ++j) {
        double a = std::max(w[j - 1], lo);
        double b = std::min(w[j], hi);
        if (b <= a) continue;
        acc += 0.5 * (interpolate(s, a) + interpolate(s, b)) * (b - a);
    }
    return acc;
}

double gaussian(double x, double mu, double sigma) {
    double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

// Largest mu with a - mu*b >= -eps*max(a) everywhere.
double stripping_coefficient(const std::vector<double>& a, const std::vector<double>& b,
                             double eps) {
    double amax = *std::max_element(a.begin(), a.end());
    double mu = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (b[j] > 0) mu = std::min(mu, (a[j] + eps * amax) / b[j]);
    }
    return mu;
}

Spectrum strip(const Spectrum& a, const Spectrum& b, double mu) {
    Spectrum out = a;
    for (std::size_t j = 0; j < out.size(); ++j)
        out.counts[j] = std::max(0.0, a.counts[j] - mu * b.counts[j]);
    return normalize(out);
}

}  // namespace

void Spectrum::validate() const {
    if (wavelengths.size() < 2) throw InvalidArgument("spectrum grid needs at least 2 points");
    if (counts.size() != wavelengths.size())
        throw InvalidArgument("spectrum: counts and wavelengths differ in length");
    for (std::size_t j = 1; j < wavelengths.size(); ++j)
        if (!(wavelengths[j] > wavelengths[j - 1]))
            throw InvalidArgument("spectrum: wavelengths must be strictly increasing");
    if (!(exposure > 0)) throw InvalidArgument("spectrum: exposure must be > 0");
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
    double acc = 0;
    for (std::size_t j = 1; j < x.size(); ++j) acc += 0.5 * (y[j] + y[j - 1]) * (x[j] - x[j - 1]);
    return acc;
}

double area(const Spectrum& s) { return trapezoid(s.wavelengths, s.counts); }

Spectrum normalize(const Spectrum& s) {
    double a = area(s);
    if (!(a > 0)) throw InvalidArgument("spectrum has non-positive area");
    Spectrum out = s;
    for (auto& c : out.counts) c /= a;
    return out;
}

Spectrum resample(const Spectrum& s, const std::vector<double>& grid) {
    Spectrum out;
    out.wavelengths = grid;
    out.exposure = s.exposure;
    out.counts.reserve(grid.size());
    for (double x : grid) out.counts.push_back(interpolate(s, x));
    return out;
}

bool same_grid(const Spectrum& a, const Spectrum& b) { return a.wavelengths == b.wavelengths; }

Spectrum correct_spectrum(const Spectrum& raw, const Spectrum& response,
                          const Spectrum& background) {
    raw.validate();
    require_same_grid(raw, response, "correct_spectrum");
    require_same_grid(raw, background, "correct_spectrum");
    Spectrum out = raw;
    for (std::size_t j = 0; j < raw.size(); ++j) {
        if (!(response.counts[j] > 0))
            throw InvalidArgument("correct_spectrum: response must be > 0 at every grid point");
        double v = (raw.counts[j] - background.counts[j]) / response.counts[j];
        out.counts[j] = std::max(0.0, v) / raw.exposure;
    }
    out.exposure = 1.0;
    return out;
}

BasisPair extract_basis(const Spectrum& spec_low, const Spectrum& spec_high,
                        const ExtractOptions& options) {
    spec_low.validate();
    require_same_grid(spec_low, spec_high, "extract_basis");
    const Spectrum lo = normalize(spec_low);
    const Spectrum hi = normalize(spec_high);

    // The NV- rich input must show a relatively stronger 639 nm line.
    const auto& w = lo.wavelengths;
    if (w.front() <= 575.0 && w.back() >= 639.0) {
        double rl = interpolate(lo, 639.0) / std::max(interpolate(lo, 575.0), 1e-300);
        double rh = interpolate(hi, 639.0) / std::max(interpolate(hi, 575.0), 1e-300);
        if (!(rl > rh))
            throw InvalidArgument("extract_basis: spec_low is not NV- richer than spec_high");
    }

    double mu = stripping_coefficient(lo.counts, hi.counts, options.epsilon);
    double nu = stripping_coefficient(hi.counts, lo.counts, options.epsilon);
    if (mu >= options.max_stripping || nu >= options.max_stripping)
        throw NumericalError("insufficient charge-fraction contrast");

    BasisPair out;
    out.minus = strip(lo, hi, mu);
    out.zero = strip(hi, lo, nu);
    out.minus.exposure = out.zero.exposure = 1.0;
    return out;
}

Decomposition decompose(const Spectrum& spec, const BasisPair& basis) {
    require_same_grid(spec, basis.minus, "decompose");
    require_same_grid(spec, basis.zero, "decompose");
    const Spectrum s = normalize(spec);
    const std::size_t n = s.size();
    double dd = 0, sd = 0;
    for (std::size_t j = 0; j < n; ++j) {
        double d = basis.minus.counts[j] - basis.zero.counts[j];
        dd += d * d;
        sd += (s.counts[j] - basis.zero.counts[j]) * d;
    }
    if (!(dd > 0)) throw NumericalError("decompose: basis functions are identical");
    Decomposition out;
    out.c_minus = std::clamp(sd / dd, 0.0, 1.0);
    out.c_zero = 1.0 - out.c_minus;
    double rss = 0;
    for (std::size_t j = 0; j < n; ++j) {
        double model = out.c_minus * basis.minus.counts[j] + out.c_zero * basis.zero.counts[j];
        double r = s.counts[j] - model;
        rss += r * r;
    }
    out.residual_rms = std::sqrt(rss / static_cast<double>(n));
    out.sigma_c = n > 1 ? std::sqrt(rss / static_cast<double>(n - 1) / dd) : 0.0;
    return out;
}

double charge_fraction(double c_minus, double c_zero, double kappa) {
    if (!(kappa > 0)) throw InvalidArgument("charge_fraction: kappa must be > 0");
    double denom = c_minus + kappa * c_zero;
    if (!(denom > 0)) throw InvalidArgument("charge_fraction: c_minus + kappa c_zero must be > 0");
    return c_minus / denom;
}

double charge_ratio(double c_minus, double c_zero, double kappa) {
    if (!(kappa > 0)) throw InvalidArgument("charge_ratio: kappa must be > 0");
    if (!(c_zero > 0)) throw InvalidArgument("charge_ratio: c_zero must be > 0");
    return (c_minus / c_zero) / kappa;
}

ChannelMatrix channel_split_factors(const BasisPair& basis, double longpass_nm,
                                    double shortpass_nm) {
    if (!(500.0 < shortpass_nm && shortpass_nm < longpass_nm && longpass_nm < 760.0))
        throw InvalidArgument("channel_split_factors: need 500 < shortpass < longpass < 760 nm");
    require_same_grid(basis.minus, basis.zero, "channel_split_factors");
    ChannelMatrix eta{};
    const Spectrum* species[2] = {&basis.minus, &basis.zero};
    for (int s = 0; s < 2; ++s) {
        const Spectrum& b = *species[s];
        double total = area(b);
        if (!(total > 0)) throw InvalidArgument("channel_split_factors: empty basis");
        double hi = b.wavelengths.back();
        double lo = b.wavelengths.front();
        eta[0][s] = std::clamp(partial_area(b, lo, shortpass_nm) / total, 0.0, 1.0);
        eta[1][s] = std::clamp(partial_area(b, longpass_nm, hi) / total, 0.0, 1.0);
    }
    return eta;
}

std::vector<double> default_grid(std::size_t points) {
    if (points < 2) throw InvalidArgument("default_grid: need at least 2 points");
    std::vector<double> g(points);
    for (std::size_t j = 0; j < points; ++j)
        g[j] = 500.0 + 260.0 * static_cast<double>(j) / static_cast<double>(points - 1);
    return g;
}

BasisPair model_basis(const std::vector<double>& grid) {
    BasisPair b;
    b.minus.wavelengths = b.zero.wavelengths = grid;
    for (double x : grid) {
        b.zero.counts.push_back(0.05 * gaussian(x, 575.0, 2.0) + 0.95 * gaussian(x, 615.0, 30.0));
        b.minus.counts.push_back(0.03 * gaussian(x, 639.0, 2.0) + 0.97 * gaussian(x, 690.0, 35.0));
    }
    b.minus = normalize(b.minus);
    b.zero = normalize(b.zero);
    return b;
}

Spectrum compose(const BasisPair& basis, double c_minus, double total) {
    require_same_grid(basis.minus, basis.zero, "compose");
    Spectrum out = basis.minus;
    for (std::size_t j = 0; j < out.size(); ++j)
        out.counts[j] = total * (c_minus * basis.minus.counts[j] +
                                 (1.0 - c_minus) * basis.zero.counts[j]);
    return out;
}

Spectrum read_spectrum_csv(const std::filesystem::path& path, double exposure) {
    auto table = io::read_csv(path);
    int wc = table.column("wavelength_nm");
    int cc = table.column("counts");
    if (wc < 0 || cc < 0)
        throw InvalidArgument(path.string() + ": expected columns wavelength_nm,counts");
    Spectrum s;
    s.exposure = exposure;
    for (const auto& row : table.rows) {
        s.wavelengths.push_back(io::parse_double(row[static_cast<std::size_t>(wc)]));
        s.counts.push_back(io::parse_double(row[static_cast<std::size_t>(cc)]));
    }
    s.validate();
    return s;
}

void write_spectrum_csv(const std::filesystem::path& path, const Spectrum& s) {
    std::string text = "wavelength_nm,counts\n";
    for (std::size_t j = 0; j < s.size(); ++j)
        text += io::fmt(s.wavelengths[j]) + "," + io::fmt(s.counts[j]) + "\n";
    io::write_text(path, text);
}

std::string grid_hash(const std::vector<double>& grid) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double x : grid) {
        for (char c : io::fmt(x) + ";") {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
    }
    return io::format("%016llx", static_cast<unsigned long long>(h));
}

}  // namespace nvrelax::spectra
