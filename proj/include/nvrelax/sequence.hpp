#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nvrelax/calibration.hpp"
#include "nvrelax/physmodel.hpp"
#include "nvrelax/spectra.hpp"

namespace nvrelax::sequence {

enum class SegmentKind { Laser, Dark, Pi };

/// One step of a half-cycle. Its length is duration + tau_scale * tau.
struct Segment {
    SegmentKind kind = SegmentKind::Dark;
    double duration = 0;
    double tau_scale = 0;
    std::string name;

    [[nodiscard]] double length(double tau) const { return duration + tau_scale * tau; }
};

/// Collection window inside a laser segment. labels[v] names it in variant v.
struct Window {
    std::array<std::string, 2> labels;
    std::size_t segment = 0;
    double offset = 0;  ///< from the start of the segment
    double length = 0;
};

/// A measurement cycle is the half-cycle template run twice: variant 0 with the pi pulse,
/// variant 1 with it omitted.
struct SequenceSpec {
    std::string name;
    std::vector<Segment> segments;
    std::vector<Window> windows;
    double min_tau = 2e-6;

    static constexpr std::array<const char*, 2> kVariants = {"pi", "nopi"};

    void validate() const;
    [[nodiscard]] double half_duration(double tau) const;
    [[nodiscard]] double cycle_duration(double tau) const { return 2.0 * half_duration(tau); }
    /// Start of a labelled window measured from the beginning of its half-cycle.
    [[nodiscard]] double window_start(const std::string& label, double tau) const;
    /// Which variant a label belongs to, or -1.
    [[nodiscard]] int variant_of(const std::string& label) const;
    [[nodiscard]] std::vector<std::string> labels() const;
    [[nodiscard]] nlohmann::json to_json() const;
};

struct Timing {
    double init = 200e-6;
    double gap = 1e-6;         ///< dark gap before the P1 control pulse
    double pulse = 5e-6;       ///< P1 control and readout pulse length
    double window = 5e-6;      ///< collection window length
    double pi_offset = 1.5e-6; ///< pi pulse position inside tau
    double readout = 200e-6;   ///< P2 readout pulse length
    double pause = 1e-3;       ///< t_p
    double min_tau = 2e-6;
};

SequenceSpec build_p1(const Timing& timing = {});
SequenceSpec build_p2(const Timing& timing = {});
/// "p1" or "p2".
SequenceSpec build(const std::string& name, const Timing& timing = {});
Timing timing_from_json(const nlohmann::json& j);

/// Detector model. Channel 0 is the short-pass (NV0) detector, channel 1 the long-pass (NV-).
struct Detection {
    std::array<double, 2> efficiency{1.0, 1.0};
    std::array<double, 2> dark_rate{0.0, 0.0};  ///< counts/s, added after attenuation
    /// When > 0, each detector gets its own neutral-density attenuation min(1, max_rate / R_c),
    /// where R_c is that detector's steady-state rate at the run power.
    double max_rate = 0.0;
};
Detection detection_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Detection& d);
/// Reads the optional "detection" block of a preset file.
Detection load_detection(const std::filesystem::path& preset);

struct RunOptions {
    std::int64_t repetitions = 50000;
    std::uint64_t seed = 0;
    int warmup = 10;
    double step = 0.5e-6;
    bool noise = true;
    bool carry_over = true;  ///< keep the ensemble state across tau blocks
    int batches = 10;
    Detection detection;
};

struct ChannelTally {
    std::uint64_t sum = 0;
    std::uint64_t sum_sq = 0;
    double expected_sum = 0;  ///< sum of Poisson means
    std::vector<std::uint64_t> batch_sums;
};

struct WindowCounts {
    std::string sequence;
    double power = 0;
    std::uint64_t seed = 0;
    std::int64_t repetitions = 0;
    int warmup = 0;
    bool noise = true;
    std::array<double, 2> attenuation{1.0, 1.0};  ///< per channel
    double simulated_time = 0;  ///< s, including warm-up cycles
    std::vector<double> taus;
    std::vector<std::string> labels;
    std::vector<int> label_variant;
    /// data[tau index][label index][channel]
    std::vector<std::vector<std::array<ChannelTally, 2>>> data;
    /// Means/variances as read back from disk (empty when the tallies are authoritative).
    std::vector<std::vector<std::array<double, 2>>> mean_override;
    std::vector<std::vector<std::array<double, 2>>> var_override;

    [[nodiscard]] int label_index(const std::string& label) const;  ///< throws if absent
    [[nodiscard]] bool has_label(const std::string& label) const;
    /// Mean counts per repetition.
    [[nodiscard]] double mean(std::size_t tau_index, const std::string& label, int channel) const;
    /// Per-repetition sample variance (0 when noise is off).
    [[nodiscard]] double variance(std::size_t tau_index, const std::string& label, int channel) const;
};

WindowCounts run_sequence(const SequenceSpec& spec, const physmodel::RateParams& params,
                          const spectra::ChannelMatrix& eta, double power,
                          const std::vector<double>& taus, const RunOptions& options);

WindowCounts run_sequence(const SequenceSpec& spec, const physmodel::RateParams& params,
                          const spectra::BasisPair& basis, double power,
                          const std::vector<double>& taus, const RunOptions& options);

/// Steady-state count rates of both detectors before attenuation, indexed by channel.
std::array<double, 2> steady_detector_rates(const physmodel::RateParams& params, const spectra::ChannelMatrix& eta,
                            double power, const Detection& detection);

struct TracePoint {
    double tau = 0;
    double value = 0;
    double sigma = 0;
};
using Trace = std::vector<TracePoint>;

/// readout / control per tau for one channel, first-order Poisson error propagation.
Trace normalize_second_half(const WindowCounts& counts, const std::string& readout_label,
                            const std::string& control_label, int channel = 1);

/// mean(IV) - mean(II) per tau for one channel.
Trace subtract_contrast(const WindowCounts& counts, int channel = 1,
                        const std::string& nopi_label = "IV", const std::string& pi_label = "II");

/// Readout of one window without normalization.
Trace raw_trace(const WindowCounts& counts, const std::string& label, int channel = 1);

struct RatioTrace {
    Trace points;
    double end_over_start = 0;
};
/// [NV-]/[NV0] per tau from the long-pass / short-pass count ratio in one window.
RatioTrace ratio_trace(const WindowCounts& counts, const calibration::RatioMap& map,
                       const std::string& window_label);

/// Writes `<stem>.csv`, `<stem>.json` (provenance) and `<stem>_batches.csv`.
void write_window_counts(const std::filesystem::path& stem, const WindowCounts& counts,
                         const nlohmann::json& provenance_extra = {});
/// Reads what write_window_counts produced, given the CSV path.
WindowCounts read_window_counts(const std::filesystem::path& csv_path);

}  // namespace nvrelax::sequence
