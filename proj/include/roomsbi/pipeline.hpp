#ifndef ROOMSBI_PIPELINE_HPP
#define ROOMSBI_PIPELINE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "roomsbi/flow.hpp"
#include "roomsbi/helmholtz.hpp"
#include "roomsbi/impedance.hpp"

namespace roomsbi {

/// Narrowest window of ceil(mass * N) sorted samples; ties go to the smallest lower bound.
std::pair<double, double> hdi(std::span<const double> samples, double mass);

/// Column names R_1, K_1, G_1, gamma_1, ..., gamma_6 in ThetaVector order.
std::vector<std::string> theta_names();

struct SkippedRecord {
    std::size_t index{0};
    std::string reason;
};

/// Prior draws and their clean simulated observations. Record i uses
/// theta = sample_prior(prior, mix_seed(seed, i)), so any prefix of a larger
/// dataset with the same seed is itself a valid dataset.
struct TrainingDataset {
    Eigen::MatrixXd theta;  ///< kThetaDim x N
    Eigen::MatrixXd data;   ///< observation size x N, noise-free
    std::vector<std::size_t> record_index;
    std::vector<SkippedRecord> skipped;
    std::size_t n_requested{0};
    std::uint64_t seed{0};
    std::vector<double> freqs;
    std::vector<Vector3> points;
    MeshOptions mesh;
    PriorSpec prior;

    Eigen::Index size() const { return theta.cols(); }
    /// First n kept records.
    TrainingDataset head(Eigen::Index n) const;
    void save(const std::filesystem::path& path) const;
    static TrainingDataset load(const std::filesystem::path& path);
};

struct GenerationOptions {
    std::size_t n_sim{4000};
    std::uint64_t seed{0};
    unsigned workers{1};
    double max_skip_fraction{0.01};
    /// Recorded in the dataset header; must describe the simulator's mesh.
    MeshOptions mesh;
    /// Called under a lock after every record.
    std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Simulates prior draws on `sim`'s mesh. Records whose solve fails are
/// skipped and listed; more than max_skip_fraction of them aborts with SolverError.
TrainingDataset generate_training_set(const Simulator& sim, const PriorSpec& prior, const GenerationOptions& opts);

/// Clean data with per-record measurement noise; record i draws from mix_seed(seed, record_index[i]).
Eigen::MatrixXd noisy_training_data(const TrainingDataset& ds, double snr_db, std::uint64_t seed);

ThetaBijection prior_bijection(const PriorSpec& prior);

/// Mean and HDI bounds of one real quantity per analysis frequency.
struct BandStats {
    Eigen::VectorXd mean, lower, upper;
};

struct SurfaceBands {
    BandStats re, im;
};

struct PosteriorEnsemble {
    Eigen::MatrixXd samples;  ///< kThetaDim x N_s
    std::vector<double> freqs;
    double mass{0.9};
    std::array<SurfaceBands, kNumSurfaces> bands;

    /// Posterior-mean impedance of a surface per frequency (mean Re + i mean Im).
    Eigen::VectorXcd mean_impedance(int surface) const;
};

/// Propagates every sample through eval_impedance and summarises marginally
/// per surface, frequency and component.
std::array<SurfaceBands, kNumSurfaces> impedance_bands(const Eigen::MatrixXd& samples,
                                                       std::span<const double> freqs, double mass,
                                                       unsigned workers = 1);

PosteriorEnsemble infer_posterior(const Flow& model, const Eigen::VectorXd& observation, Eigen::Index n_samples,
                                  std::uint64_t seed, std::span<const double> freqs, double mass = 0.9,
                                  unsigned workers = 1);

void write_posterior_samples_csv(const std::filesystem::path& path, const Eigen::MatrixXd& samples);
Eigen::MatrixXd read_posterior_samples_csv(const std::filesystem::path& path);
/// Columns: frequency_hz, mean_re, hdi_lo_re, hdi_hi_re, mean_im, hdi_lo_im, hdi_hi_im.
void write_band_csv(const std::filesystem::path& path, std::span<const double> freqs, const SurfaceBands& bands);

} // namespace roomsbi

#endif // ROOMSBI_PIPELINE_HPP
