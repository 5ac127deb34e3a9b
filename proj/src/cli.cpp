#include "nvrelax/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "nvrelax/calibration.hpp"
#include "nvrelax/error.hpp"
#include "nvrelax/fitting.hpp"
#include "nvrelax/io.hpp"
#include "nvrelax/physmodel.hpp"
#include "nvrelax/sequence.hpp"
#include "nvrelax/spectra.hpp"

namespace nvrelax::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kReportSchemaVersion = "1.0";

// JSON configuration files: top-level keys are global options, nested objects are
// subcommand sections ({"simulate": {"reps": 1000}}).
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            input >> j;
        } catch (const json::exception& e) {
            throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
        std::vector<CLI::ConfigItem> out;
        flatten(j, "", {}, out);
        return out;
    }

private:
    static std::string scalar(const json& v, const std::string& name) {
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number_integer()) return std::to_string(v.get<long long>());
        if (v.is_number()) return io::fmt(v.get<double>());
        if (v.is_string()) return v.get<std::string>();
        throw CLI::ConversionError("config key '" + name + "' has an unsupported value");
    }

    static void flatten(const json& j, const std::string& name, std::vector<std::string> parents,
                        std::vector<CLI::ConfigItem>& out) {
        if (j.is_object()) {
            if (!name.empty()) parents.push_back(name);
            for (const auto& [key, value] : j.items()) flatten(value, key, parents, out);
            return;
        }
        CLI::ConfigItem item;
        item.name = name;
        item.parents = parents;
        if (j.is_array()) {
            for (const auto& v : j) item.inputs.push_back(scalar(v, name));
        } else {
            item.inputs.push_back(scalar(j, name));
        }
        out.push_back(std::move(item));
    }
};

struct Global {
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;
};

void say(const Global& g, const std::string& msg) {
    if (!g.quiet) std::cout << msg << "\n";
}

fs::path require_out(const Global& g) {
    if (g.out.empty()) throw InvalidArgument("--out: an output directory is required");
    fs::path p(g.out);
    fs::create_directories(p);
    return p;
}

fitting::Trace to_fit(const sequence::Trace& t) {
    fitting::Trace f;
    for (const auto& p : t) {
        f.x.push_back(p.tau);
        f.y.push_back(p.value);
        f.sigma.push_back(p.sigma > 0 ? p.sigma : 1.0);
    }
    bool any_zero = std::any_of(t.begin(), t.end(), [](const auto& p) { return !(p.sigma > 0); });
    if (any_zero) f.sigma.clear();
    return f;
}

std::string unit_suffix(const std::string& text, std::size_t& used, double& value) {
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        throw InvalidArgument("cannot parse quantity '" + text + "'");
    }
    std::string unit = text.substr(used);
    unit.erase(0, unit.find_first_not_of(' '));
    return unit;
}

// ---------------------------------------------------------------------------------------------
// simulate

struct SimulateArgs {
    std::string preset;
    std::string sequences = "p1";
    std::string powers;
    std::string taus = "log:10us:10ms:20";
    std::int64_t reps = 50000;
    int warmup = 10;
    std::string step = "0.5us";
    bool no_noise = false;
    bool independent_tau = false;
    int batches = 10;
    double longpass = spectra::kDefaultLongpassNm;
    double shortpass = spectra::kDefaultShortpassNm;
    std::string init, pause, pi_offset, window, readout, gap, pulse;
};

struct Model {
    physmodel::RateParams params;
    sequence::Detection detection;
    std::string name = "defaults";
};

Model load_model(const std::string& preset) {
    Model m;
    if (preset.empty()) return m;
    m.params = physmodel::load_rate_params(preset);
    m.detection = sequence::load_detection(preset);
    json j = io::read_json(preset);
    m.name = j.is_object() && j.contains("name") ? j.at("name").get<std::string>() : fs::path(preset).stem().string();
    return m;
}

sequence::Timing timing_from(const SimulateArgs& a) {
    sequence::Timing t;
    auto set = [](const std::string& text, double& dst) {
        if (!text.empty()) dst = parse_quantity(text, Quantity::Time);
    };
    set(a.init, t.init);
    set(a.pause, t.pause);
    set(a.pi_offset, t.pi_offset);
    set(a.window, t.window);
    set(a.readout, t.readout);
    set(a.gap, t.gap);
    set(a.pulse, t.pulse);
    return t;
}

void cmd_simulate(const Global& g, const SimulateArgs& a) {
    const bool noise = !a.no_noise;
    if (noise && !g.seed) throw InvalidArgument("--seed: required when noise is enabled");
    if (a.powers.empty()) throw InvalidArgument("--powers: at least one power is required");
    const std::vector<double> powers = parse_grid(a.powers, Quantity::Power);
    const std::vector<double> taus = parse_grid(a.taus, Quantity::Time);
    for (std::size_t i = 1; i < taus.size(); ++i)
        if (!(taus[i] > taus[i - 1])) throw InvalidArgument("--taus: grid must be strictly increasing");
    for (double p : powers)
        if (!(p > 0)) throw InvalidArgument("--powers: powers must be > 0");

    std::vector<std::string> seqs;
    {
        std::stringstream ss(a.sequences);
        std::string s;
        while (std::getline(ss, s, ',')) seqs.push_back(s);
    }
    const Model model = load_model(a.preset);
    const sequence::Timing timing = timing_from(a);
    const auto grid = spectra::default_grid();
    const auto basis = spectra::model_basis(grid);
    const auto eta = spectra::channel_split_factors(basis, a.longpass, a.shortpass);

    sequence::RunOptions opt;
    opt.repetitions = a.reps;
    opt.seed = g.seed.value_or(0);
    opt.warmup = a.warmup;
    opt.step = parse_quantity(a.step, Quantity::Time);
    opt.noise = noise;
    opt.carry_over = !a.independent_tau;
    opt.batches = a.batches;
    opt.detection = model.detection;

    const fs::path out = require_out(g);
    json runs = json::array();
    for (const auto& name : seqs) {
        const auto spec = sequence::build(name, timing);
        for (std::size_t pi = 0; pi < powers.size(); ++pi) {
            sequence::RunOptions o = opt;
            // Independent random stream per (sequence, power) run.
            o.seed = opt.seed * 1000003ULL + (name == "p1" ? 0ULL : 500000ULL) + pi;
            auto counts = sequence::run_sequence(spec, model.params, eta, powers[pi], taus, o);
            std::string stem = io::format("%s_%02zu", name.c_str(), pi);
            sequence::write_window_counts(out / stem, counts, {{"sequence_spec", spec.to_json()}});
            runs.push_back({{"sequence", name}, {"power_w", powers[pi]}, {"file", stem + ".csv"}});
            say(g, io::format("simulated %s at %g W -> %s.csv", name.c_str(), powers[pi], stem.c_str()));
        }
    }
    json manifest = {
        {"format", "nvrelax-dataset"},
        {"version", 1},
        {"seed", opt.seed},
        {"model", {{"name", model.name}, {"params", physmodel::to_json(model.params)}, {"detection", sequence::to_json(model.detection)}}},
        {"channels", {{"longpass_nm", a.longpass}, {"shortpass_nm", a.shortpass}, {"eta", {{eta[0][0], eta[0][1]}, {eta[1][0], eta[1][1]}}}}},
        {"basis_grid_hash", spectra::grid_hash(grid)},
        {"options", {{"repetitions", opt.repetitions}, {"warmup", opt.warmup}, {"step_s", opt.step}, {"noise", opt.noise}, {"carry_over", opt.carry_over}, {"batches", opt.batches}}},
        {"taus_s", taus},
        {"runs", runs}};
    io::write_json(out / "dataset.json", manifest);
}

// ---------------------------------------------------------------------------------------------
// spectra utilities and calibrate

struct SpectraArgs {
    std::string raw, response, background, low, high, spectrum, basis_dir, preset, powers;
    double exposure = 1.0;
    bool no_noise = false;
    double collection = 1.0;
};

spectra::Spectrum flat_like(const spectra::Spectrum& s, double v) {
    spectra::Spectrum out = s;
    std::fill(out.counts.begin(), out.counts.end(), v);
    return out;
}

spectra::BasisPair read_basis(const fs::path& dir) {
    spectra::BasisPair b;
    b.minus = spectra::read_spectrum_csv(dir / "basis_minus.csv");
    b.zero = spectra::read_spectrum_csv(dir / "basis_zero.csv");
    return b;
}

void write_basis(const fs::path& dir, const spectra::BasisPair& b, const json& extra) {
    spectra::write_spectrum_csv(dir / "basis_minus.csv", b.minus);
    spectra::write_spectrum_csv(dir / "basis_zero.csv", b.zero);
    json meta = extra.is_object() ? extra : json::object();
    meta["grid_hash"] = spectra::grid_hash(b.minus.wavelengths);
    meta["grid_points"] = b.minus.size();
    io::write_json(dir / "basis.json", meta);
}

void cmd_spectra_correct(const Global& g, const SpectraArgs& a) {
    auto raw = spectra::read_spectrum_csv(a.raw, a.exposure);
    auto response = a.response.empty() ? flat_like(raw, 1.0) : spectra::read_spectrum_csv(a.response);
    auto background = a.background.empty() ? flat_like(raw, 0.0) : spectra::read_spectrum_csv(a.background);
    auto corrected = spectra::correct_spectrum(raw, response, background);
    spectra::write_spectrum_csv(require_out(g) / "corrected.csv", corrected);
}

void cmd_spectra_extract(const Global& g, const SpectraArgs& a) {
    auto lo = spectra::read_spectrum_csv(a.low);
    auto hi = spectra::read_spectrum_csv(a.high);
    spectra::ExtractOptions opt;
    auto basis = spectra::extract_basis(lo, hi, opt);
    write_basis(require_out(g), basis,
                {{"method", "mutual stripping"}, {"epsilon", opt.epsilon}, {"low", fs::path(a.low).filename().string()},
                 {"high", fs::path(a.high).filename().string()}});
}

void cmd_spectra_decompose(const Global& g, const SpectraArgs& a) {
    auto s = spectra::read_spectrum_csv(a.spectrum);
    auto basis = read_basis(a.basis_dir);
    auto d = spectra::decompose(s, basis);
    json j = {{"c_minus", d.c_minus}, {"c_zero", d.c_zero}, {"residual_rms", d.residual_rms}, {"sigma_c", d.sigma_c}};
    if (g.out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        io::write_json(require_out(g) / "decomposition.json", j);
    }
}

// Continuous-wave spectra of the model ensemble in steady state, one per power.
void cmd_spectra_synth(const Global& g, const SpectraArgs& a) {
    if (!a.no_noise && !g.seed) throw InvalidArgument("--seed: required when noise is enabled");
    if (a.powers.empty()) throw InvalidArgument("--powers: at least one power is required");
    if (!(a.exposure > 0)) throw InvalidArgument("--exposure must be > 0");
    const Model model = load_model(a.preset);
    const auto powers = parse_grid(a.powers, Quantity::Power);
    const auto grid = spectra::default_grid();
    const auto basis = spectra::model_basis(grid);
    const fs::path out = require_out(g);
    std::mt19937_64 rng(g.seed.value_or(0));
    json list = json::array();
    for (std::size_t i = 0; i < powers.size(); ++i) {
        auto state = physmodel::steady_state(model.params, powers[i]);
        auto rates = physmodel::fluorescence_rates(state, model.params, powers[i]);
        spectra::Spectrum s;
        s.wavelengths = grid;
        for (std::size_t j = 0; j < grid.size(); ++j) {
            double bin = j + 1 < grid.size() ? grid[j + 1] - grid[j] : grid[j] - grid[j - 1];
            double mu = a.collection * a.exposure * bin *
                        (rates.minus * basis.minus.counts[j] + rates.zero * basis.zero.counts[j]);
            if (!a.no_noise) {
                std::poisson_distribution<std::int64_t> d(mu);
                mu = static_cast<double>(d(rng));
            }
            s.counts.push_back(mu);
        }
        std::string file = io::format("spectrum_%02zu.csv", i);
        spectra::write_spectrum_csv(out / file, s);
        list.push_back({{"file", file}, {"power_w", powers[i]}, {"exposure_s", a.exposure}});
    }
    io::write_json(out / "spectra.json", {{"format", "nvrelax-spectra"}, {"version", 1}, {"spectra", list}});
    say(g, io::format("wrote %zu spectra", powers.size()));
}

struct CalibrateArgs {
    std::string spectra_dir, response, background;
    double longpass = spectra::kDefaultLongpassNm;
    double shortpass = spectra::kDefaultShortpassNm;
    double saturation_kw_cm2 = 100.0;
    double spot_diameter = 700e-9;
};

void cmd_calibrate(const Global& g, const CalibrateArgs& a) {
    const fs::path dir(a.spectra_dir);
    json manifest = io::read_json(dir / "spectra.json");
    if (!manifest.contains("spectra") || !manifest["spectra"].is_array() || manifest["spectra"].empty())
        throw InvalidArgument("spectra.json: no spectra listed");

    struct Entry {
        double power;
        spectra::Spectrum corrected;
    };
    std::vector<Entry> entries;
    for (const auto& item : manifest["spectra"]) {
        double power = item.at("power_w").get<double>();
        double exposure = item.contains("exposure_s") ? item.at("exposure_s").get<double>() : 1.0;
        auto raw = spectra::read_spectrum_csv(dir / item.at("file").get<std::string>(), exposure);
        auto response = a.response.empty() ? flat_like(raw, 1.0) : spectra::read_spectrum_csv(a.response);
        auto background = a.background.empty() ? flat_like(raw, 0.0) : spectra::read_spectrum_csv(a.background);
        entries.push_back({power, spectra::correct_spectrum(raw, response, background)});
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) { return x.power < y.power; });
    if (entries.size() < 2) throw InvalidArgument("calibrate: need spectra at two or more powers");

    auto basis = spectra::extract_basis(entries.front().corrected, entries.back().corrected);
    const auto eta = spectra::channel_split_factors(basis, a.longpass, a.shortpass);

    calibration::KappaOptions kopt;
    kopt.saturation_intensity = a.saturation_kw_cm2 * 1e7;
    kopt.spot_diameter = a.spot_diameter;
    const double p_sat = calibration::power_for_intensity(kopt.saturation_intensity, kopt.spot_diameter);

    std::vector<calibration::PowerSeriesPoint> series;
    json table = json::array();
    std::vector<std::pair<double, spectra::Decomposition>> decs;
    for (const auto& e : entries) {
        auto d = spectra::decompose(e.corrected, basis);
        decs.emplace_back(e.power, d);
        if (e.power <= p_sat) series.push_back({e.power, d.c_minus, d.c_zero, spectra::area(e.corrected), d.sigma_c});
    }
    if (series.size() < kopt.min_points)
        throw InvalidArgument(io::format("calibrate: %zu spectra below the saturation threshold (%g kW/cm^2, %g W); "
                                         "at least %zu are required",
                                         series.size(), a.saturation_kw_cm2, p_sat, kopt.min_points));
    const auto kappa = calibration::estimate_kappa(series, kopt);
    if (!kappa.identifiable) throw NumericalError("calibrate: no charge conversion in the power series; kappa is not identifiable");

    std::vector<calibration::RatioPoint> points;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& s = entries[i].corrected;
        const auto& d = decs[i].second;
        const double total = spectra::area(s);
        spectra::BasisPair self{s, s};
        auto frac = spectra::channel_split_factors(self, a.longpass, a.shortpass);
        double x = frac[1][0] / frac[0][0];
        // The two reference spectra define the basis; their coefficients carry no map information.
        const bool reference = i == 0 || i + 1 == entries.size();
        const bool mixed = d.c_minus > 0 && d.c_zero > 0;
        double y = mixed ? spectra::charge_ratio(d.c_minus, d.c_zero, kappa.kappa) : std::nan("");
        double sy = mixed ? std::max(d.sigma_c / (d.c_zero * d.c_zero * kappa.kappa), 1e-9 * y) : std::nan("");
        if (!reference && mixed) points.push_back({x, y, sy});
        table.push_back({{"basis_reference", reference}, {"power_w", entries[i].power}, {"c_minus", d.c_minus},
                         {"c_zero", d.c_zero}, {"sigma_c", d.sigma_c}, {"total_counts", total}, {"count_ratio", x},
                         {"conc_ratio", mixed ? json(y) : json()}, {"conc_ratio_sigma", mixed ? json(sy) : json()},
                         {"sub_saturation", entries[i].power <= p_sat}, {"used_in_map", !reference && mixed}});
    }
    if (points.size() < 3) throw NumericalError("calibrate: fewer than three mixed-charge spectra for the ratio map");
    const auto map = calibration::fit_ratio_map(points);

    const fs::path out = require_out(g);
    write_basis(out, basis, {{"method", "mutual stripping"}, {"epsilon", spectra::ExtractOptions{}.epsilon}});
    json bundle = {
        {"format", "nvrelax-calibration"},
        {"version", 1},
        {"basis_grid_hash", spectra::grid_hash(basis.minus.wavelengths)},
        {"channels", {{"longpass_nm", a.longpass}, {"shortpass_nm", a.shortpass}, {"eta", {{eta[0][0], eta[0][1]}, {eta[1][0], eta[1][1]}}}}},
        {"saturation", {{"intensity_kw_cm2", a.saturation_kw_cm2}, {"spot_diameter_m", a.spot_diameter}, {"power_w", p_sat}}},
        {"kappa", calibration::to_json(kappa)},
        {"ratio_map", calibration::to_json(map)},
        {"points", table}};
    io::write_json(out / "calibration.json", bundle);
    say(g, io::format("kappa = %.4f +- %.4f, a = %.5g, n = %.5g", kappa.kappa, kappa.sigma, map.a, map.n));
}

// ---------------------------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
    std::string dataset, calibration;
    std::string t_r1 = "100us", t_r2 = "2ms", t1 = "1.4ms";
    bool svg = false;
};

json fit_or_error(const std::function<fitting::FitResult()>& f, std::optional<fitting::FitResult>& keep) {
    try {
        keep = f();
        return keep->to_json();
    } catch (const Error& e) {
        keep.reset();
        return {{"error", e.what()}};
    }
}

struct Series {
    std::string label;
    std::vector<double> x, y;
};

void write_svg(const fs::path& path, const std::string& title, const std::vector<Series>& series) {
    const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!(s.x[i] > 0) || !std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, std::log10(s.x[i]));
            xmax = std::max(xmax, std::log10(s.x[i]));
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!(xmax > xmin)) xmax = xmin + 1;
    if (!(ymax > ymin)) ymax = ymin + 1;
    auto px = [&](double x) { return L + (std::log10(x) - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::string svg = io::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" font-size=\"12\">\n", W, H);
    svg += io::format("<text x=\"%g\" y=\"20\">%s</text>\n", L, title.c_str());
    svg += io::format("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n", L, T, W - L - R, H - T - B);
    svg += io::format("<text x=\"%g\" y=\"%g\">tau (s), log scale: 1e%.1f .. 1e%.1f</text>\n", L, H - 15, xmin, xmax);
    svg += io::format("<text x=\"5\" y=\"%g\">%.4g</text><text x=\"5\" y=\"%g\">%.4g</text>\n", T + 10, ymax, H - B, ymin);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        std::string pts;
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (s.x[i] > 0 && std::isfinite(s.y[i])) pts += io::format("%.2f,%.2f ", px(s.x[i]), py(s.y[i]));
        svg += io::format("<polyline fill=\"none\" stroke=\"%s\" points=\"%s\"/>\n", colors[k % 6], pts.c_str());
        svg += io::format("<text x=\"%g\" y=\"%g\" fill=\"%s\">%s</text>\n", W - R - 150, T + 15 + 15.0 * static_cast<double>(k),
                          colors[k % 6], s.label.c_str());
    }
    svg += "</svg>\n";
    io::write_text(path, svg);
}

struct FigureTable {
    std::string csv = "power_w,tau_s,value,sigma,fit\n";
    std::vector<Series> series;

    void add(double power, const sequence::Trace& t, const std::optional<fitting::FitResult>& fit) {
        std::vector<double> x;
        for (const auto& p : t) x.push_back(p.tau);
        std::vector<double> f = fit ? fitting::evaluate(*fit, x) : std::vector<double>(x.size(), std::nan(""));
        Series s{io::format("%.3g W", power), x, {}};
        for (std::size_t i = 0; i < t.size(); ++i) {
            csv += io::fmt(power) + "," + io::fmt(t[i].tau) + "," + io::fmt(t[i].value) + "," + io::fmt(t[i].sigma) + "," +
                   io::fmt(f[i]) + "\n";
            s.y.push_back(t[i].value);
        }
        series.push_back(std::move(s));
    }
};

void cmd_analyze(const Global& g, const AnalyzeArgs& a) {
    const fs::path dir(a.dataset);
    json ds = io::read_json(dir / "dataset.json");
    json cal = io::read_json(a.calibration);
    if (!ds.contains("runs") || !ds["runs"].is_array() || ds["runs"].empty())
        throw InvalidArgument("dataset: no runs listed in dataset.json");

    try {
        const auto& dc = ds.at("channels");
        const auto& cc = cal.at("channels");
        if (dc.at("longpass_nm").get<double>() != cc.at("longpass_nm").get<double>() ||
            dc.at("shortpass_nm").get<double>() != cc.at("shortpass_nm").get<double>())
            throw InvalidArgument("calibration/dataset mismatch: channel filter edges differ");
        if (ds.at("basis_grid_hash") != cal.at("basis_grid_hash"))
            throw InvalidArgument("calibration/dataset mismatch: spectral grids differ");
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("calibration/dataset metadata incomplete: ") + e.what());
    }
    const auto map = calibration::ratio_map_from_json(cal.at("ratio_map"));
    const double t_r1 = parse_quantity(a.t_r1, Quantity::Time);
    const double t_r2 = parse_quantity(a.t_r2, Quantity::Time);
    const double t1 = parse_quantity(a.t1, Quantity::Time);

    struct Run {
        std::string sequence;
        double power;
        sequence::WindowCounts counts;
    };
    std::vector<Run> runs;
    for (const auto& r : ds["runs"])
        runs.push_back({r.at("sequence").get<std::string>(), r.at("power_w").get<double>(),
                        sequence::read_window_counts(dir / r.at("file").get<std::string>())});
    std::stable_sort(runs.begin(), runs.end(), [](const Run& x, const Run& y) {
        return x.sequence != y.sequence ? x.sequence < y.sequence : x.power < y.power;
    });
    double p1_min = 1e300;
    for (const auto& r : runs)
        if (r.sequence == "p1") p1_min = std::min(p1_min, r.power);

    const fs::path out = require_out(g);
    FigureTable nv0, norm, raw, contrast, ratio_iv, ratio_iii, p2_iii, p2_vi, p2_contrast;
    json p1_list = json::array(), p2_list = json::array(), snr_list = json::array();
    std::string snr_csv = "sequence,power_w,snr\n";
    json consistency_values = json::array();

    for (const auto& r : runs) {
        const auto& c = r.counts;
        if (r.sequence == "p1") {
            std::optional<fitting::FitResult> mono, tri, rawfit, confit, bi;
            auto tn = sequence::normalize_second_half(c, "IV", "III", 1);
            auto tr = sequence::raw_trace(c, "IV", 1);
            auto tc = sequence::subtract_contrast(c, 1);
            auto t0 = sequence::normalize_second_half(c, "IV", "III", 0);
            json e;
            e["power_w"] = r.power;
            json nj;
            nj["monoexp"] = fit_or_error([&] { return fitting::fit_monoexp(to_fit(tn)); }, mono);
            nj["triexp_fixed"] = fit_or_error([&] { return fitting::fit_triexp_fixed(to_fit(tn), t_r1, t_r2, t1); }, tri);
            const bool lowest = r.power == p1_min;
            nj["policy_model"] = lowest ? "monoexp" : "triexp_fixed";
            if (tri) {
                bool inverted = tri->values[0] + tri->values[2] > tri->values[4];
                nj["classification"] = inverted ? "inverted" : "decaying";
            } else {
                nj["classification"] = nullptr;
            }
            e["normalized"] = nj;
            e["raw"] = {{"monoexp", fit_or_error([&] { return fitting::fit_monoexp(to_fit(tr)); }, rawfit)}};
            json cj = {{"monoexp", fit_or_error([&] { return fitting::fit_monoexp(to_fit(tc)); }, confit)}};
            double snr = std::nan("");
            if (confit) snr = fitting::snr(to_fit(tc), *confit);
            cj["snr"] = std::isfinite(snr) ? json(snr) : json();
            e["contrast"] = cj;
            e["nv0_recharge"] = {{"biexp", fit_or_error([&] { return fitting::fit_biexp(to_fit(t0)); }, bi)}};
            try {
                auto r4 = sequence::ratio_trace(c, map, "IV");
                auto r3 = sequence::ratio_trace(c, map, "III");
                e["ratio"] = {{"readout_end_over_start", r4.end_over_start}, {"control_end_over_start", r3.end_over_start}};
                ratio_iv.add(r.power, r4.points, std::nullopt);
                ratio_iii.add(r.power, r3.points, std::nullopt);
            } catch (const Error& err) {
                e["ratio"] = {{"error", err.what()}};
            }
            p1_list.push_back(e);
            snr_list.push_back({{"sequence", "p1"}, {"power_w", r.power}, {"snr", std::isfinite(snr) ? json(snr) : json()}});
            snr_csv += "p1," + io::fmt(r.power) + "," + io::fmt(snr) + "\n";

            nv0.add(r.power, t0, bi);
            norm.add(r.power, tn, lowest ? mono : tri);
            raw.add(r.power, tr, rawfit);
            contrast.add(r.power, tc, confit);
            if (lowest) {
                if (confit) consistency_values.push_back({{"source", "p1_contrast"}, {"t1", confit->value("T")}, {"error", confit->error("T")}});
                if (mono) consistency_values.push_back({{"source", "p1_normalized"}, {"t1", mono->value("T")}, {"error", mono->error("T")}});
            }
        } else {
            std::optional<fitting::FitResult> f3, f6, fc;
            auto t3 = sequence::normalize_second_half(c, "IV", "III", 1);
            auto t6 = sequence::normalize_second_half(c, "IV", "VI", 1);
            auto tc = sequence::subtract_contrast(c, 1);
            json e;
            e["power_w"] = r.power;
            e["normalized_III"] = {{"monoexp", fit_or_error([&] { return fitting::fit_monoexp(to_fit(t3)); }, f3)}};
            e["normalized_VI"] = {{"monoexp", fit_or_error([&] { return fitting::fit_monoexp(to_fit(t6)); }, f6)}};
            json cj = {{"monoexp", fit_or_error([&] { return fitting::fit_monoexp(to_fit(tc)); }, fc)}};
            double snr = fc ? fitting::snr(to_fit(tc), *fc) : std::nan("");
            cj["snr"] = std::isfinite(snr) ? json(snr) : json();
            e["contrast"] = cj;
            p2_list.push_back(e);
            snr_list.push_back({{"sequence", "p2"}, {"power_w", r.power}, {"snr", std::isfinite(snr) ? json(snr) : json()}});
            snr_csv += "p2," + io::fmt(r.power) + "," + io::fmt(snr) + "\n";
            p2_iii.add(r.power, t3, f3);
            p2_vi.add(r.power, t6, f6);
            p2_contrast.add(r.power, tc, fc);
            if (r.power == p1_min) {
                if (f3) consistency_values.push_back({{"source", "p2_normalized_III"}, {"t1", f3->value("T")}, {"error", f3->error("T")}});
                if (f6) consistency_values.push_back({{"source", "p2_normalized_VI"}, {"t1", f6->value("T")}, {"error", f6->error("T")}});
            }
        }
    }

    json consistency = {{"power_w", p1_min < 1e300 ? json(p1_min) : json()}, {"values", consistency_values}};
    double max_z = 0;
    for (std::size_t i = 0; i < consistency_values.size(); ++i)
        for (std::size_t j = i + 1; j < consistency_values.size(); ++j) {
            const auto& u = consistency_values[i];
            const auto& v = consistency_values[j];
            if (!u["error"].is_number() || !v["error"].is_number()) continue;
            double s = std::hypot(u["error"].get<double>(), v["error"].get<double>());
            if (s > 0) max_z = std::max(max_z, std::abs(u["t1"].get<double>() - v["t1"].get<double>()) / s);
        }
    consistency["max_pairwise_z"] = max_z;
    consistency["consistent_within_1sigma"] = max_z <= 1.0;

    json report = {
        {"schema_version", kReportSchemaVersion},
        {"dataset", {{"seed", ds.value("seed", 0ULL)}, {"model", ds.at("model").at("name")}, {"runs", ds.at("runs").size()}}},
        {"calibration", {{"kappa", cal.at("kappa")}, {"ratio_map", cal.at("ratio_map")}}},
        {"fixed_time_constants", {{"t_r1", t_r1}, {"t_r2", t_r2}, {"t1", t1}}},
        {"p1", p1_list},
        {"p2", p2_list},
        {"snr", snr_list},
        {"t1_consistency", consistency}};
    io::write_json(out / "report.json", report);

    const std::pair<const char*, FigureTable*> figures[] = {
        {"nv0_recharge", &nv0},         {"nvminus_normalized", &norm}, {"raw_readout", &raw},
        {"contrast", &contrast},        {"ratio_readout", &ratio_iv},  {"ratio_control", &ratio_iii},
        {"p2_normalized_III", &p2_iii}, {"p2_normalized_VI", &p2_vi},  {"p2_contrast", &p2_contrast}};
    for (const auto& [name, table] : figures) {
        if (table->series.empty()) continue;
        io::write_text(out / (std::string(name) + ".csv"), table->csv);
        if (a.svg) write_svg(out / (std::string(name) + ".svg"), name, table->series);
    }
    io::write_text(out / "snr.csv", snr_csv);
    say(g, "wrote " + (out / "report.json").string());
}

// ---------------------------------------------------------------------------------------------
// fit

struct FitArgs {
    std::string model, input;
    std::string t_r1 = "100us", t_r2 = "2ms", t1 = "1.4ms";
    int peaks = 8;
};

void cmd_fit(const Global& g, const FitArgs& a) {
    auto trace = fitting::read_trace_csv(a.input);
    fitting::FitResult r;
    if (a.model == "monoexp") {
        r = fitting::fit_monoexp(trace);
    } else if (a.model == "biexp") {
        r = fitting::fit_biexp(trace);
    } else if (a.model == "triexp_fixed") {
        r = fitting::fit_triexp_fixed(trace, parse_quantity(a.t_r1, Quantity::Time), parse_quantity(a.t_r2, Quantity::Time),
                                      parse_quantity(a.t1, Quantity::Time));
    } else if (a.model == "lorentzian") {
        r = fitting::fit_lorentzian_sum(trace, a.peaks);
    } else if (a.model == "rabi") {
        r = fitting::fit_rabi(trace);
    } else {
        throw InvalidArgument("--model: unknown model '" + a.model + "'");
    }
    json j = r.to_json();
    if (r.model == "monoexp" || r.model == "biexp" || r.model == "triexp_fixed") j["snr"] = fitting::snr(trace, r);
    if (g.out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        io::write_json(require_out(g) / "fit.json", j);
    }
}

}  // namespace

// ---------------------------------------------------------------------------------------------

double parse_quantity(const std::string& text, Quantity kind) {
    std::size_t used = 0;
    double value = 0;
    std::string unit = unit_suffix(text, used, value);
    static const std::map<std::string, double> power_units = {{"", 1}, {"W", 1}, {"mW", 1e-3}, {"uW", 1e-6}, {"nW", 1e-9}};
    static const std::map<std::string, double> time_units = {{"", 1}, {"s", 1}, {"ms", 1e-3}, {"us", 1e-6}, {"ns", 1e-9}};
    const auto& table = kind == Quantity::Power ? power_units : time_units;
    auto it = table.find(unit);
    if (it == table.end()) throw InvalidArgument("unknown unit '" + unit + "' in '" + text + "'");
    if (!std::isfinite(value)) throw InvalidArgument("non-finite quantity '" + text + "'");
    return value * it->second;
}

std::vector<double> parse_grid(const std::string& text, Quantity kind) {
    std::vector<double> out;
    if (text.rfind("log:", 0) == 0 || text.rfind("lin:", 0) == 0) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        std::string p;
        while (std::getline(ss, p, ':')) parts.push_back(p);
        if (parts.size() != 4) throw InvalidArgument("grid '" + text + "' must be kind:start:stop:n");
        double a = parse_quantity(parts[1], kind);
        double b = parse_quantity(parts[2], kind);
        long n = 0;
        try {
            std::size_t used = 0;
            n = std::stol(parts[3], &used);
            if (used != parts[3].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw InvalidArgument("grid '" + text + "': bad point count");
        }
        if (n < 1) throw InvalidArgument("grid '" + text + "': need at least one point");
        bool log = parts[0] == "log";
        if (log && !(a > 0 && b > 0)) throw InvalidArgument("grid '" + text + "': log grid needs positive ends");
        for (long i = 0; i < n; ++i) {
            double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
            out.push_back(log ? std::exp(std::log(a) + t * (std::log(b) - std::log(a))) : a + t * (b - a));
        }
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(parse_quantity(item, kind));
    }
    if (out.empty()) throw InvalidArgument("empty list '" + text + "'");
    return out;
}

int run(int argc, const char* const* argv) {
    CLI::App app{"NV-center relaxometry simulator and analysis pipeline", "nvrelax"};
    app.require_subcommand(1);
    app.config_formatter(std::make_shared<JsonConfig>());
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.set_config("--config", "", "JSON file with option values (subcommand options in a nested object)");
    app.fallthrough();

    Global g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Random seed (required when noise is enabled)");
    app.add_option("--out", g.out, "Output directory");
    app.add_flag("--quiet", g.quiet, "Suppress progress messages");

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Run P1/P2 pulse sequences and write window counts");
    s->add_option("--preset", sim.preset, "Rate-parameter preset (JSON)");
    s->add_option("--sequence", sim.sequences, "p1, p2 or p1,p2")->capture_default_str();
    s->add_option("--powers", sim.powers, "Laser powers, e.g. 5uW,0.54mW or log:5uW:0.54mW:4");
    s->add_option("--taus", sim.taus, "Tau grid, e.g. log:10us:10ms:20")->capture_default_str();
    s->add_option("--reps", sim.reps, "Repetitions per tau")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--warmup", sim.warmup, "Warm-up cycles excluded per tau")->capture_default_str()->check(CLI::NonNegativeNumber);
    s->add_option("--step", sim.step, "Laser integration sub-step")->capture_default_str();
    s->add_option("--batches", sim.batches, "Repetition batches kept for bootstrap")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_flag("--no-noise", sim.no_noise, "Write expected counts instead of Poisson draws");
    s->add_flag("--independent-tau", sim.independent_tau, "Reset the ensemble at every tau");
    s->add_option("--longpass", sim.longpass, "Long-pass filter edge (nm)")->capture_default_str();
    s->add_option("--shortpass", sim.shortpass, "Short-pass filter edge (nm)")->capture_default_str();
    s->add_option("--init", sim.init, "Initialization pulse length");
    s->add_option("--pause", sim.pause, "Pause t_p after each half-cycle");
    s->add_option("--pi-offset", sim.pi_offset, "Pi pulse position inside tau");
    s->add_option("--window", sim.window, "Collection window length");
    s->add_option("--readout", sim.readout, "P2 readout pulse length");
    s->add_option("--gap", sim.gap, "P1 dark gap before the control pulse");
    s->add_option("--pulse", sim.pulse, "P1 control/readout pulse length");

    CalibrateArgs calib;
    auto* c = app.add_subcommand("calibrate", "Derive kappa and the count-ratio map from CW spectra");
    c->add_option("--spectra", calib.spectra_dir, "Directory with spectra.json and spectrum CSVs")->required();
    c->add_option("--response", calib.response, "Spectral response CSV");
    c->add_option("--background", calib.background, "Background CSV");
    c->add_option("--longpass", calib.longpass, "Long-pass filter edge (nm)")->capture_default_str();
    c->add_option("--shortpass", calib.shortpass, "Short-pass filter edge (nm)")->capture_default_str();
    c->add_option("--saturation-intensity", calib.saturation_kw_cm2, "Saturation intensity (kW/cm^2)")->capture_default_str();
    c->add_option("--spot-diameter", calib.spot_diameter, "1/e^2 spot diameter (m)")->capture_default_str();

    AnalyzeArgs an;
    auto* z = app.add_subcommand("analyze", "Fit traces of a simulated dataset and write a report");
    z->add_option("--dataset", an.dataset, "Dataset directory written by simulate")->required();
    z->add_option("--calibration", an.calibration, "calibration.json written by calibrate")->required();
    z->add_option("--t-r1", an.t_r1, "Fixed fast recharge time for triexp fits")->capture_default_str();
    z->add_option("--t-r2", an.t_r2, "Fixed slow recharge time for triexp fits")->capture_default_str();
    z->add_option("--t1", an.t1, "Fixed T1 for triexp fits")->capture_default_str();
    z->add_flag("--svg", an.svg, "Also write SVG line plots");

    FitArgs fa;
    auto* f = app.add_subcommand("fit", "Fit a single x,y[,sigma] trace");
    f->add_option("--model", fa.model, "monoexp, biexp, triexp_fixed, lorentzian, rabi")->required();
    f->add_option("--input", fa.input, "Trace CSV")->required();
    f->add_option("--t-r1", fa.t_r1)->capture_default_str();
    f->add_option("--t-r2", fa.t_r2)->capture_default_str();
    f->add_option("--t1", fa.t1)->capture_default_str();
    f->add_option("--peaks", fa.peaks, "Number of Lorentzian dips")->capture_default_str();

    SpectraArgs sp;
    auto* spc = app.add_subcommand("spectra", "Spectrum utilities");
    spc->require_subcommand(1);
    auto* sc = spc->add_subcommand("correct", "Background/response correction");
    sc->add_option("--raw", sp.raw)->required();
    sc->add_option("--response", sp.response);
    sc->add_option("--background", sp.background);
    sc->add_option("--exposure", sp.exposure, "Exposure time (s)")->capture_default_str();
    auto* se = spc->add_subcommand("extract", "Extract NV-/NV0 basis functions");
    se->add_option("--low", sp.low, "NV- rich (low power) spectrum")->required();
    se->add_option("--high", sp.high, "NV0 rich (high power) spectrum")->required();
    auto* sd = spc->add_subcommand("decompose", "Decompose a spectrum into basis coefficients");
    sd->add_option("--spectrum", sp.spectrum)->required();
    sd->add_option("--basis", sp.basis_dir, "Directory with basis_minus.csv and basis_zero.csv")->required();
    auto* ss = spc->add_subcommand("synth", "Synthesize steady-state CW spectra from a preset");
    ss->add_option("--preset", sp.preset);
    ss->add_option("--powers", sp.powers)->required();
    ss->add_option("--exposure", sp.exposure)->capture_default_str();
    ss->add_option("--collection", sp.collection, "Scale applied to the detected count rate")->capture_default_str();
    ss->add_flag("--no-noise", sp.no_noise);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        if (s->parsed()) cmd_simulate(g, sim);
        else if (c->parsed()) cmd_calibrate(g, calib);
        else if (z->parsed()) cmd_analyze(g, an);
        else if (f->parsed()) cmd_fit(g, fa);
        else if (sc->parsed()) cmd_spectra_correct(g, sp);
        else if (se->parsed()) cmd_spectra_extract(g, sp);
        else if (sd->parsed()) cmd_spectra_decompose(g, sp);
        else if (ss->parsed()) cmd_spectra_synth(g, sp);
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace nvrelax::cli
