#ifndef ROOMSBI_CONFIG_HPP
#define ROOMSBI_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roomsbi/diagnostics.hpp"
#include "roomsbi/flow.hpp"
#include "roomsbi/geometry.hpp"
#include "roomsbi/impedance.hpp"

namespace roomsbi {

/// One explicit seed per random operation.
struct SeedConfig {
    std::uint64_t observation_points{1};
    std::uint64_t dataset{2};
    std::uint64_t training_noise{3};
    /// Split, shuffling and flow initialisation.
    std::uint64_t training{4};
    std::uint64_t observation_noise{5};
    std::uint64_t posterior{6};
    std::uint64_t validation_nodes{7};
    std::uint64_t ppc{8};
    std::uint64_t calibration{9};
    std::uint64_t lc2st{10};
};

struct DiagnosticsConfig {
    std::size_t n_ppc{1000};
    std::size_t validation_cap{3000};
    double validation_exclusion{0.1};
    std::size_t n_cal{500};
    std::size_t n_null{100};
    Eigen::Index n_eval{1000};
    std::size_t n_observations{3};
    double level{0.95};
    ClassifierConfig classifier;
    double corruption_fraction{0.25};
};

struct StudyConfig {
    std::vector<double> snr_db{10, 20, 30};
    std::vector<std::size_t> n_sim{500, 2000, 4000};
    std::vector<std::size_t> n_pos;
    Eigen::Index n_samples{20000};
};

struct RunConfig {
    RoomSpec room;
    MeshOptions mesh;
    /// The reference observation uses this multiple of the training mesh.
    int observation_refinement{2};
    std::vector<double> freqs = sixth_octave_centres();
    /// observation.seed and training.seed are ignored; seeds holds them.
    ObservationOptions observation;
    PriorSpec prior = PriorSpec::benchmark();
    ReferenceSet reference = ReferenceSet::benchmark();
    double snr_db{30.0};
    std::size_t n_sim{4000};
    double max_skip_fraction{0.01};
    FlowConfig flow;
    TrainConfig training;
    Eigen::Index n_samples{100000};
    double hdi_mass{0.9};
    DiagnosticsConfig diagnostics;
    StudyConfig study;
    SeedConfig seeds;
    std::string output_dir{"out"};

    /// Throws ValidationError citing the violated constraint.
    void validate() const;
    /// Every seed becomes mix_seed(base, k) with a fixed k per field.
    void override_seeds(std::uint64_t base);
};

/// Parses the JSON schema documented in the README. Missing keys take their
/// defaults, unknown keys and wrong types raise ValidationError naming the key.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& cfg);
std::string serialize_config(const RunConfig& cfg);

} // namespace roomsbi

#endif // ROOMSBI_CONFIG_HPP
