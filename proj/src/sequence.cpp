#include "nvrelax/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "nvrelax/error.hpp"
#include "nvrelax/io.hpp"

namespace nvrelax::sequence {

using physmodel::EnsembleState;
using physmodel::Propagator;
using physmodel::RateParams;

namespace {

const char* kind_name(SegmentKind k) {
    switch (k) {
        case SegmentKind::Laser: return "laser";
        case SegmentKind::Dark: return "dark";
        case SegmentKind::Pi: return "pi";
    }
    return "?";
}

void check_positive(double v, const char* name) {
    if (!(v > 0) || !std::isfinite(v)) throw InvalidArgument(std::string("timing: ") + name + " must be > 0");
}

void check_timing(const Timing& t) {
    check_positive(t.init, "init");
    check_positive(t.gap, "gap");
    check_positive(t.pulse, "pulse");
    check_positive(t.window, "window");
    check_positive(t.pi_offset, "pi_offset");
    check_positive(t.readout, "readout");
    check_positive(t.pause, "pause");
    check_positive(t.min_tau, "min_tau");
    if (!(t.pi_offset < t.min_tau))
        throw InvalidArgument("timing: the pi pulse must fall inside the shortest tau (pi_offset < min_tau)");
}

// One executable piece of a half-cycle.
struct Piece {
    Propagator map;
    int window = -1;  // label index, or -1
    bool pi = false;
};

std::vector<Piece> compile_half(const SequenceSpec& spec, const RateParams& params, double power,
                                double tau, int variant, double step,
                                const std::vector<std::string>& labels) {
    std::vector<Piece> raw;
    for (std::size_t s = 0; s < spec.segments.size(); ++s) {
        const Segment& seg = spec.segments[s];
        const double len = seg.length(tau);
        if (seg.kind == SegmentKind::Pi) {
            if (variant == 0) raw.push_back({Propagator::identity(), -1, true});
            continue;
        }
        if (len <= 0) continue;
        if (seg.kind == SegmentKind::Dark) {
            raw.push_back({Propagator::dark(params, len), -1, false});
            continue;
        }
        // Laser: split at window edges, integrate each piece in sub-steps <= step.
        std::vector<std::pair<double, double>> spans;
        std::vector<int> span_label;
        for (const Window& w : spec.windows) {
            if (w.segment != s) continue;
            auto it = std::find(labels.begin(), labels.end(), w.labels[static_cast<std::size_t>(variant)]);
            spans.emplace_back(w.offset, w.offset + w.length);
            span_label.push_back(static_cast<int>(it - labels.begin()));
        }
        std::vector<double> edges = {0.0, len};
        for (auto [a, b] : spans) {
            edges.push_back(a);
            edges.push_back(b);
        }
        std::sort(edges.begin(), edges.end());
        edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
        for (std::size_t e = 0; e + 1 < edges.size(); ++e) {
            double a = edges[e], b = edges[e + 1];
            if (b <= a) continue;
            int label = -1;
            for (std::size_t k = 0; k < spans.size(); ++k)
                if (a >= spans[k].first && b <= spans[k].second) label = span_label[k];
            const double dt = b - a;
            const auto nsub = static_cast<std::int64_t>(std::max(1.0, std::ceil(dt / step - 1e-9)));
            const Propagator sub = Propagator::light(params, power, dt / static_cast<double>(nsub));
            Propagator piece = Propagator::identity();
            for (std::int64_t k = 0; k < nsub; ++k) piece = piece.then(sub);
            raw.push_back({piece, label, false});
        }
    }
    // Merge runs of plain maps so each repetition applies only a handful of propagators.
    std::vector<Piece> merged;
    for (auto& p : raw) {
        if (!merged.empty() && !p.pi && p.window < 0 && !merged.back().pi && merged.back().window < 0) {
            merged.back().map = merged.back().map.then(p.map);
        } else {
            merged.push_back(p);
        }
    }
    return merged;
}

std::uint64_t poisson(std::mt19937_64& rng, double mean) {
    if (mean <= 0) return 0;
    std::poisson_distribution<std::int64_t> d(mean);
    return static_cast<std::uint64_t>(d(rng));
}

std::string channel_name(int c) { return c == 0 ? "1" : "2"; }

}  // namespace

// ---------------------------------------------------------------------------------------------

void SequenceSpec::validate() const {
    if (segments.empty()) throw InvalidArgument("sequence: no segments");
    for (const auto& s : segments) {
        if (s.kind != SegmentKind::Pi && !(s.length(min_tau) >= 0))
            throw InvalidArgument("sequence: segment '" + s.name + "' has negative length at min_tau");
    }
    for (const auto& w : windows) {
        if (w.segment >= segments.size()) throw InvalidArgument("sequence: window refers to a missing segment");
        const Segment& s = segments[w.segment];
        if (s.kind != SegmentKind::Laser)
            throw InvalidArgument("sequence: window " + w.labels[0] + " is not inside a laser segment");
        if (s.tau_scale != 0) throw InvalidArgument("sequence: windows need fixed-length laser segments");
        if (!(w.length > 0) || w.offset < 0 || w.offset + w.length > s.duration * (1 + 1e-12))
            throw InvalidArgument("sequence: window " + w.labels[0] + " exceeds its laser segment");
    }
}

double SequenceSpec::half_duration(double tau) const {
    double t = 0;
    for (const auto& s : segments)
        if (s.kind != SegmentKind::Pi) t += s.length(tau);
    return t;
}

double SequenceSpec::window_start(const std::string& label, double tau) const {
    for (const auto& w : windows) {
        if (w.labels[0] != label && w.labels[1] != label) continue;
        double t = 0;
        for (std::size_t s = 0; s < w.segment; ++s)
            if (segments[s].kind != SegmentKind::Pi) t += segments[s].length(tau);
        return t + w.offset;
    }
    throw InvalidArgument("sequence: no window labelled " + label);
}

int SequenceSpec::variant_of(const std::string& label) const {
    for (const auto& w : windows)
        for (int v = 0; v < 2; ++v)
            if (w.labels[static_cast<std::size_t>(v)] == label) return v;
    return -1;
}

std::vector<std::string> SequenceSpec::labels() const {
    std::vector<std::string> out;
    for (int v = 0; v < 2; ++v)
        for (const auto& w : windows) out.push_back(w.labels[static_cast<std::size_t>(v)]);
    return out;
}

nlohmann::json SequenceSpec::to_json() const {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : segments)
        segs.push_back({{"kind", kind_name(s.kind)}, {"name", s.name}, {"duration_s", s.duration}, {"tau_scale", s.tau_scale}});
    nlohmann::json wins = nlohmann::json::array();
    for (const auto& w : windows)
        wins.push_back({{"labels", {{"pi", w.labels[0]}, {"nopi", w.labels[1]}}},
                        {"segment", w.segment},
                        {"offset_s", w.offset},
                        {"length_s", w.length}});
    return {{"name", name}, {"segments", segs}, {"windows", wins}, {"min_tau_s", min_tau}};
}

SequenceSpec build_p1(const Timing& t) {
    check_timing(t);
    if (t.window > t.pulse) throw InvalidArgument("timing: window longer than the P1 pulse");
    SequenceSpec s;
    s.name = "p1";
    s.min_tau = t.min_tau;
    s.segments = {
        {SegmentKind::Laser, t.init, 0, "init"},
        {SegmentKind::Dark, t.gap, 0, "gap"},
        {SegmentKind::Laser, t.pulse, 0, "control"},
        {SegmentKind::Dark, t.pi_offset, 0, "tau_a"},
        {SegmentKind::Pi, 0, 0, "pi"},
        {SegmentKind::Dark, -t.pi_offset, 1, "tau_b"},
        {SegmentKind::Laser, t.pulse, 0, "readout"},
        {SegmentKind::Dark, t.pause, 0, "pause"},
    };
    s.windows = {
        {{"I", "III"}, 2, 0.0, t.window},
        {{"II", "IV"}, 6, 0.0, t.window},
    };
    s.validate();
    return s;
}

SequenceSpec build_p2(const Timing& t) {
    check_timing(t);
    if (t.window > t.init || 2 * t.window > t.readout)
        throw InvalidArgument("timing: P2 windows do not fit their pulses");
    SequenceSpec s;
    s.name = "p2";
    s.min_tau = t.min_tau;
    s.segments = {
        {SegmentKind::Laser, t.init, 0, "init"},
        {SegmentKind::Dark, t.pi_offset, 0, "tau_a"},
        {SegmentKind::Pi, 0, 0, "pi"},
        {SegmentKind::Dark, -t.pi_offset, 1, "tau_b"},
        {SegmentKind::Laser, t.readout, 0, "readout"},
        {SegmentKind::Dark, t.pause, 0, "pause"},
    };
    s.windows = {
        {{"I", "III"}, 0, t.init - t.window, t.window},
        {{"II", "IV"}, 4, 0.0, t.window},
        {{"V", "VI"}, 4, t.readout - t.window, t.window},
    };
    s.validate();
    return s;
}

SequenceSpec build(const std::string& name, const Timing& timing) {
    if (name == "p1") return build_p1(timing);
    if (name == "p2") return build_p2(timing);
    throw InvalidArgument("unknown sequence '" + name + "' (expected p1 or p2)");
}

Timing timing_from_json(const nlohmann::json& j) {
    Timing t;
    if (j.is_null()) return t;
    if (!j.is_object()) throw InvalidArgument("timing: expected an object");
    const std::pair<const char*, double Timing::*> fields[] = {
        {"init", &Timing::init},       {"gap", &Timing::gap},         {"pulse", &Timing::pulse},
        {"window", &Timing::window},   {"pi_offset", &Timing::pi_offset}, {"readout", &Timing::readout},
        {"pause", &Timing::pause},     {"min_tau", &Timing::min_tau}};
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto& [name, field] : fields) {
            if (key != name) continue;
            if (!value.is_number()) throw InvalidArgument("timing." + key + " must be a number");
            t.*field = value.get<double>();
            known = true;
        }
        if (!known) throw InvalidArgument("timing: unknown key '" + key + "'");
    }
    return t;
}

Detection detection_from_json(const nlohmann::json& j) {
    Detection d;
    if (j.is_null()) return d;
    if (!j.is_object()) throw InvalidArgument("detection: expected an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "max_rate") {
            if (!value.is_number()) throw InvalidArgument("detection.max_rate must be a number");
            d.max_rate = value.get<double>();
        } else if (key == "efficiency" || key == "dark_rate") {
            if (!value.is_array() || value.size() != 2 || !value[0].is_number() || !value[1].is_number())
                throw InvalidArgument("detection." + key + " must be a pair of numbers");
            auto& dst = key == "efficiency" ? d.efficiency : d.dark_rate;
            dst = {value[0].get<double>(), value[1].get<double>()};
        } else {
            throw InvalidArgument("detection: unknown key '" + key + "'");
        }
    }
    for (int c = 0; c < 2; ++c) {
        if (!(d.efficiency[static_cast<std::size_t>(c)] >= 0)) throw InvalidArgument("detection.efficiency must be >= 0");
        if (!(d.dark_rate[static_cast<std::size_t>(c)] >= 0)) throw InvalidArgument("detection.dark_rate must be >= 0");
    }
    if (!(d.max_rate >= 0)) throw InvalidArgument("detection.max_rate must be >= 0");
    return d;
}

nlohmann::json to_json(const Detection& d) {
    return {{"efficiency", {d.efficiency[0], d.efficiency[1]}},
            {"dark_rate", {d.dark_rate[0], d.dark_rate[1]}},
            {"max_rate", d.max_rate}};
}

Detection load_detection(const std::filesystem::path& preset) {
    nlohmann::json j = io::read_json(preset);
    if (j.is_object() && j.contains("detection")) return detection_from_json(j.at("detection"));
    return {};
}

std::array<double, 2> steady_detector_rates(const RateParams& params, const spectra::ChannelMatrix& eta,
                                            double power, const Detection& detection) {
    auto r = physmodel::fluorescence_rates(physmodel::steady_state(params, power), params, power);
    std::array<double, 2> out{};
    for (std::size_t c = 0; c < 2; ++c) out[c] = detection.efficiency[c] * (eta[c][0] * r.minus + eta[c][1] * r.zero);
    return out;
}

// ---------------------------------------------------------------------------------------------

int WindowCounts::label_index(const std::string& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return static_cast<int>(i);
    throw InvalidArgument("window counts have no window labelled " + label);
}

bool WindowCounts::has_label(const std::string& label) const {
    return std::find(labels.begin(), labels.end(), label) != labels.end();
}

double WindowCounts::mean(std::size_t t, const std::string& label, int channel) const {
    const auto l = static_cast<std::size_t>(label_index(label));
    const auto c = static_cast<std::size_t>(channel);
    if (!mean_override.empty()) return mean_override.at(t).at(l)[c];
    const ChannelTally& tally = data.at(t).at(l)[c];
    const auto n = static_cast<double>(repetitions);
    return noise ? static_cast<double>(tally.sum) / n : tally.expected_sum / n;
}

double WindowCounts::variance(std::size_t t, const std::string& label, int channel) const {
    const auto l = static_cast<std::size_t>(label_index(label));
    const auto c = static_cast<std::size_t>(channel);
    if (!var_override.empty()) return var_override.at(t).at(l)[c];
    if (!noise || repetitions < 2) return 0.0;
    const ChannelTally& tally = data.at(t).at(l)[c];
    const auto n = static_cast<double>(repetitions);
    const double s = static_cast<double>(tally.sum);
    return std::max(0.0, (static_cast<double>(tally.sum_sq) - s * s / n) / (n - 1.0));
}

WindowCounts run_sequence(const SequenceSpec& spec, const RateParams& params, const spectra::BasisPair& basis,
                          double power, const std::vector<double>& taus, const RunOptions& options) {
    return run_sequence(spec, params, spectra::channel_split_factors(basis), power, taus, options);
}

WindowCounts run_sequence(const SequenceSpec& spec, const RateParams& params, const spectra::ChannelMatrix& eta,
                          double power, const std::vector<double>& taus, const RunOptions& options) {
    spec.validate();
    params.validate();
    if (options.repetitions < 1) throw InvalidArgument("run_sequence: repetitions must be >= 1");
    if (options.warmup < 0) throw InvalidArgument("run_sequence: warmup must be >= 0");
    if (!(options.step > 0)) throw InvalidArgument("run_sequence: step must be > 0");
    if (options.batches < 1) throw InvalidArgument("run_sequence: batches must be >= 1");
    if (!(power > 0)) throw InvalidArgument("run_sequence: power must be > 0");
    if (taus.empty()) throw InvalidArgument("run_sequence: no tau values");
    for (double tau : taus)
        if (!(tau >= spec.min_tau))
            throw InvalidArgument(io::format("run_sequence: tau = %g s is shorter than the minimum %g s", tau, spec.min_tau));

    const Detection& det = options.detection;
    WindowCounts out;
    out.sequence = spec.name;
    out.power = power;
    out.seed = options.seed;
    out.repetitions = options.repetitions;
    out.warmup = options.warmup;
    out.noise = options.noise;
    out.taus = taus;
    out.labels = spec.labels();
    for (const auto& l : out.labels) out.label_variant.push_back(spec.variant_of(l));
    if (det.max_rate > 0) {
        auto r = steady_detector_rates(params, eta, power, det);
        for (std::size_t c = 0; c < 2; ++c) out.attenuation[c] = r[c] > det.max_rate ? det.max_rate / r[c] : 1.0;
    }

    const std::size_t nl = out.labels.size();
    const auto nb = static_cast<std::size_t>(options.batches);
    const std::int64_t per_batch = (options.repetitions + options.batches - 1) / options.batches;

    EnsembleState state = EnsembleState::dark_equilibrium(params);
    for (std::size_t ti = 0; ti < taus.size(); ++ti) {
        const double tau = taus[ti];
        if (!options.carry_over) state = EnsembleState::dark_equilibrium(params);
        std::array<std::vector<Piece>, 2> halves = {
            compile_half(spec, params, power, tau, 0, options.step, out.labels),
            compile_half(spec, params, power, tau, 1, options.step, out.labels)};

        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(ti)};
        std::mt19937_64 rng(seq);

        std::vector<std::array<ChannelTally, 2>> tally(nl);
        for (auto& w : tally)
            for (auto& c : w) c.batch_sums.assign(nb, 0);

        const std::int64_t cycles = options.warmup + options.repetitions;
        for (std::int64_t cyc = 0; cyc < cycles; ++cyc) {
            const bool record = cyc >= options.warmup;
            const std::size_t batch = record ? static_cast<std::size_t>((cyc - options.warmup) / per_batch) : 0;
            for (const auto& half : halves) {
                for (const Piece& p : half) {
                    if (p.pi) {
                        state = physmodel::apply_pi_pulse(state, params);
                        continue;
                    }
                    if (p.window >= 0 && record) {
                        auto emitted = physmodel::integrated_fluorescence(p.map.integrate(state), params, power);
                        for (int c = 0; c < 2; ++c) {
                            const auto cc = static_cast<std::size_t>(c);
                            double mu = out.attenuation[cc] * det.efficiency[cc] *
                                            (eta[cc][0] * emitted.minus + eta[cc][1] * emitted.zero) +
                                        det.dark_rate[cc] * p.map.duration();
                            ChannelTally& t = tally[static_cast<std::size_t>(p.window)][cc];
                            t.expected_sum += mu;
                            if (options.noise) {
                                std::uint64_t k = poisson(rng, mu);
                                t.sum += k;
                                t.sum_sq += k * k;
                                t.batch_sums[batch] += k;
                            }
                        }
                    }
                    state = p.map.apply(state);
                }
            }
        }
        out.simulated_time += static_cast<double>(cycles) * spec.cycle_duration(tau);
        out.data.push_back(std::move(tally));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------

namespace {

void require_positive_mean(double m, const std::string& what) {
    if (!(m > 0)) throw NumericalError(what + " has zero mean counts");
}

}  // namespace

Trace normalize_second_half(const WindowCounts& counts, const std::string& readout_label,
                            const std::string& control_label, int channel) {
    (void)counts.label_index(readout_label);
    (void)counts.label_index(control_label);
    const auto n = static_cast<double>(counts.repetitions);
    Trace out;
    for (std::size_t t = 0; t < counts.taus.size(); ++t) {
        double r = counts.mean(t, readout_label, channel);
        double c = counts.mean(t, control_label, channel);
        require_positive_mean(c, "control window " + control_label);
        require_positive_mean(r, "readout window " + readout_label);
        double v = r / c;
        // Poisson: per-repetition variance equals the mean.
        double rel = std::sqrt(1.0 / (n * r) + 1.0 / (n * c));
        out.push_back({counts.taus[t], v, v * rel});
    }
    return out;
}

Trace subtract_contrast(const WindowCounts& counts, int channel, const std::string& nopi_label,
                        const std::string& pi_label) {
    if (!counts.has_label(nopi_label) || !counts.has_label(pi_label))
        throw InvalidArgument("subtract_contrast: both variants (" + nopi_label + ", " + pi_label + ") are required");
    const auto n = static_cast<double>(counts.repetitions);
    Trace out;
    for (std::size_t t = 0; t < counts.taus.size(); ++t) {
        double a = counts.mean(t, nopi_label, channel);
        double b = counts.mean(t, pi_label, channel);
        double sigma = std::sqrt((a + b) / n);
        out.push_back({counts.taus[t], a - b, sigma});
    }
    return out;
}

Trace raw_trace(const WindowCounts& counts, const std::string& label, int channel) {
    (void)counts.label_index(label);
    const auto n = static_cast<double>(counts.repetitions);
    Trace out;
    for (std::size_t t = 0; t < counts.taus.size(); ++t) {
        double m = counts.mean(t, label, channel);
        out.push_back({counts.taus[t], m, std::sqrt(std::max(m, 0.0) / n)});
    }
    return out;
}

RatioTrace ratio_trace(const WindowCounts& counts, const calibration::RatioMap& map, const std::string& label) {
    (void)counts.label_index(label);
    const auto n = static_cast<double>(counts.repetitions);
    RatioTrace out;
    for (std::size_t t = 0; t < counts.taus.size(); ++t) {
        double m2 = counts.mean(t, label, 1);
        double m1 = counts.mean(t, label, 0);
        if (!(m1 > 0)) throw NumericalError("ratio_trace: short-pass counts are zero in window " + label);
        require_positive_mean(m2, "long-pass window " + label);
        double x = m2 / m1;
        auto mapped = calibration::map_count_ratio(map, x);
        double rel_x = std::sqrt(1.0 / (n * m1) + 1.0 / (n * m2));
        double s_count = map.n * mapped.value * rel_x;
        out.points.push_back({counts.taus[t], mapped.value, std::hypot(s_count, mapped.sigma)});
    }
    out.end_over_start = out.points.back().value / out.points.front().value;
    return out;
}

// ---------------------------------------------------------------------------------------------

void write_window_counts(const std::filesystem::path& stem, const WindowCounts& counts,
                         const nlohmann::json& provenance_extra) {
    std::string csv = "tau_s,variant,window,channel,mean_counts,var_counts,n_reps\n";
    std::string batches = "tau_s,window,channel,batch,counts\n";
    for (std::size_t t = 0; t < counts.taus.size(); ++t) {
        for (std::size_t l = 0; l < counts.labels.size(); ++l) {
            const std::string& label = counts.labels[l];
            const char* variant = SequenceSpec::kVariants[static_cast<std::size_t>(counts.label_variant[l])];
            for (int c = 0; c < 2; ++c) {
                csv += io::fmt(counts.taus[t]) + "," + variant + "," + label + "," + channel_name(c) + "," +
                       io::fmt(counts.mean(t, label, c)) + "," + io::fmt(counts.variance(t, label, c)) + "," +
                       std::to_string(counts.repetitions) + "\n";
                if (counts.noise && !counts.data.empty()) {
                    const auto& bs = counts.data[t][l][static_cast<std::size_t>(c)].batch_sums;
                    for (std::size_t b = 0; b < bs.size(); ++b)
                        batches += io::fmt(counts.taus[t]) + "," + label + "," + channel_name(c) + "," +
                                   std::to_string(b) + "," + std::to_string(bs[b]) + "\n";
                }
            }
        }
    }
    nlohmann::json prov = provenance_extra.is_object() ? provenance_extra : nlohmann::json::object();
    prov["sequence"] = counts.sequence;
    prov["power_w"] = counts.power;
    prov["seed"] = counts.seed;
    prov["repetitions"] = counts.repetitions;
    prov["warmup_cycles"] = counts.warmup;
    prov["noise"] = counts.noise;
    prov["attenuation"] = counts.attenuation;
    prov["simulated_time_s"] = counts.simulated_time;
    prov["labels"] = counts.labels;
    nlohmann::json variants = nlohmann::json::array();
    for (int v : counts.label_variant) variants.push_back(SequenceSpec::kVariants[static_cast<std::size_t>(v)]);
    prov["label_variants"] = variants;

    const std::filesystem::path base = stem;
    io::write_text(std::filesystem::path(base.string() + ".csv"), csv);
    io::write_text(std::filesystem::path(base.string() + "_batches.csv"), batches);
    io::write_json(std::filesystem::path(base.string() + ".json"), prov);
}

WindowCounts read_window_counts(const std::filesystem::path& csv_path) {
    std::filesystem::path sidecar = csv_path;
    sidecar.replace_extension(".json");
    nlohmann::json prov = io::read_json(sidecar);
    WindowCounts wc;
    try {
        wc.sequence = prov.at("sequence").get<std::string>();
        wc.power = prov.at("power_w").get<double>();
        wc.seed = prov.at("seed").get<std::uint64_t>();
        wc.repetitions = prov.at("repetitions").get<std::int64_t>();
        wc.warmup = prov.at("warmup_cycles").get<int>();
        wc.noise = prov.at("noise").get<bool>();
        wc.attenuation = prov.at("attenuation").get<std::array<double, 2>>();
        wc.simulated_time = prov.at("simulated_time_s").get<double>();
        wc.labels = prov.at("labels").get<std::vector<std::string>>();
        for (const auto& v : prov.at("label_variants")) wc.label_variant.push_back(v.get<std::string>() == "pi" ? 0 : 1);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(sidecar.string() + ": " + e.what());
    }

    auto table = io::read_csv(csv_path);
    const char* cols[] = {"tau_s", "variant", "window", "channel", "mean_counts", "var_counts", "n_reps"};
    int idx[7];
    for (int i = 0; i < 7; ++i) {
        idx[i] = table.column(cols[i]);
        if (idx[i] < 0) throw InvalidArgument(csv_path.string() + ": missing column " + cols[i]);
    }
    auto field = [&](const std::vector<std::string>& row, int i) { return row[static_cast<std::size_t>(idx[i])]; };
    for (const auto& row : table.rows) {
        double tau = io::parse_double(field(row, 0));
        if (wc.taus.empty() || wc.taus.back() != tau) {
            wc.taus.push_back(tau);
            wc.mean_override.emplace_back(wc.labels.size(), std::array<double, 2>{0, 0});
            wc.var_override.emplace_back(wc.labels.size(), std::array<double, 2>{0, 0});
        }
        auto l = static_cast<std::size_t>(wc.label_index(field(row, 2)));
        std::string ch = field(row, 3);
        if (ch != "1" && ch != "2") throw InvalidArgument(csv_path.string() + ": bad channel " + ch);
        std::size_t c = ch == "1" ? 0 : 1;
        wc.mean_override.back()[l][c] = io::parse_double(field(row, 4));
        wc.var_override.back()[l][c] = io::parse_double(field(row, 5));
        if (static_cast<std::int64_t>(io::parse_double(field(row, 6))) != wc.repetitions)
            throw InvalidArgument(csv_path.string() + ": n_reps disagrees with the provenance file");
    }
    if (wc.taus.empty()) throw InvalidArgument(csv_path.string() + ": no data rows");
    return wc;
}

}  // namespace nvrelax::sequence
