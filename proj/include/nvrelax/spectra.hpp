#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace nvrelax::spectra {

struct Spectrum {
    std::vector<double> wavelengths;  ///< nm, strictly increasing
    std::vector<double> counts;
    double exposure = 1.0;            ///< s

    [[nodiscard]] std::size_t size() const { return wavelengths.size(); }
    /// Throws InvalidArgument on a malformed grid (length < 2, non-increasing, size mismatch).
    void validate() const;
};

/// Area-normalized NV- and NV0 emission shapes on a common grid.
struct BasisPair {
    Spectrum minus;
    Spectrum zero;
};

struct Decomposition {
    double c_minus = 0;
    double c_zero = 0;
    double residual_rms = 0;
    double sigma_c = 0;  ///< standard error of c_minus from the residual scatter
};

/// ch index 0 is the short-pass (NV0) detector, 1 the long-pass (NV-) detector;
/// species index 0 is NV-, 1 is NV0.
using ChannelMatrix = std::array<std::array<double, 2>, 2>;

inline constexpr double kDefaultLongpassNm = 665.0;
inline constexpr double kDefaultShortpassNm = 600.0;

double trapezoid(const std::vector<double>& x, const std::vector<double>& y);
double area(const Spectrum& s);
/// Copy scaled to unit trapezoidal area. Throws if the area is not positive.
Spectrum normalize(const Spectrum& s);
/// Linear interpolation onto a new grid; zero outside the source range.
Spectrum resample(const Spectrum& s, const std::vector<double>& grid);
bool same_grid(const Spectrum& a, const Spectrum& b);

/// (raw - background) / response, clamped at zero, divided by raw.exposure.
Spectrum correct_spectrum(const Spectrum& raw, const Spectrum& response,
                          const Spectrum& background);

struct ExtractOptions {
    double epsilon = 1e-3;
    double max_stripping = 0.999;
};

/// Mutual stripping of an NV- rich and an NV0 rich spectrum.
BasisPair extract_basis(const Spectrum& spec_low, const Spectrum& spec_high,
                        const ExtractOptions& options = {});

/// Constrained fit spec ~ c*b- + (1-c)*b0 on area-normalized data.
Decomposition decompose(const Spectrum& spec, const BasisPair& basis);

/// c- / (c- + kappa c0)
double charge_fraction(double c_minus, double c_zero, double kappa);
/// (c- / c0) / kappa
double charge_ratio(double c_minus, double c_zero, double kappa);

ChannelMatrix channel_split_factors(const BasisPair& basis,
                                    double longpass_nm = kDefaultLongpassNm,
                                    double shortpass_nm = kDefaultShortpassNm);

/// Synthetic emission shapes used by the simulator presets: a narrow zero-phonon line on a
/// broad sideband (NV0 at 575 nm, NV- at 639 nm), area-normalized on the given grid.
BasisPair model_basis(const std::vector<double>& grid);
/// 500..760 nm with the given number of points.
std::vector<double> default_grid(std::size_t points = 1369);

/// c*b- + (1-c)*b0 scaled to `total` area.
Spectrum compose(const BasisPair& basis, double c_minus, double total = 1.0);

/// CSV `wavelength_nm,counts` with header.
Spectrum read_spectrum_csv(const std::filesystem::path& path, double exposure = 1.0);
void write_spectrum_csv(const std::filesystem::path& path, const Spectrum& s);

/// FNV-1a hash of the grid values, hex encoded.
std::string grid_hash(const std::vector<double>& grid);

}  // namespace nvrelax::spectra
