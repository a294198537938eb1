#ifndef ROOMSBI_DIAGNOSTICS_HPP
#define ROOMSBI_DIAGNOSTICS_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "roomsbi/flow.hpp"
#include "roomsbi/helmholtz.hpp"
#include "roomsbi/pipeline.hpp"

namespace roomsbi {

/// Mean over frequencies of |est - ref| / |ref|. `freqs`, when given, names
/// the offending frequency in the DomainError raised for a zero reference.
double relative_l2(const Eigen::VectorXcd& est, const Eigen::VectorXcd& ref, std::span<const double> freqs = {});

/// |ref^H est|^2 / ((ref^H ref)(est^H est)).
double mac(const Eigen::VectorXcd& ref, const Eigen::VectorXcd& est);

/// dB re 20 uPa of a peak complex amplitude (RMS = |p| / sqrt 2); -inf for p = 0.
double spl(Complex p);
double spl_magnitude(double abs_p);

/// Training-mesh nodes usable for validation: not within `exclusion` of the
/// source, not coinciding with an observation point, at most `cap` of them
/// chosen at random. Returned indices are sorted.
std::vector<Eigen::Index> validation_nodes(const HexMesh& mesh, const RoomSpec& room,
                                           std::span<const Vector3> observation_points, std::size_t cap,
                                           std::uint64_t seed, double exclusion = 0.1);

struct PPCOptions {
    std::size_t n_ppc{1000};
    std::uint64_t seed{0};
    double mass{0.9};
    unsigned workers{1};
    double max_failure_fraction{0.01};
};

/// Posterior predictive check at the validation points.
///
/// Per posterior draw and frequency the field is averaged over the points:
/// mean Re p, mean Im p, and SPL of the mean |p|. The same reduction is applied
/// to the reference field. MAC compares each draw's field with the reference.
struct PPCReport {
    std::vector<double> freqs;
    std::size_t n_ppc{0};
    std::size_t n_failed{0};
    double mass{0.9};
    Eigen::MatrixXd re, im, spl, mac;  ///< successful draws x frequencies
    BandStats re_band, im_band, spl_band, mac_band;
    Eigen::VectorXd ref_re, ref_im, ref_spl;

    /// Reference Re, Im and SPL averages all inside their HDIs at frequency f.
    bool reference_inside(Eigen::Index f) const;
    double fraction_inside() const;
    void write_csv(const std::filesystem::path& path) const;
};

/// `predictive` simulates draws on the training mesh at the validation points;
/// `reference` holds the reference field at the same points (points x frequencies).
PPCReport posterior_predictive_check(const Eigen::MatrixXd& posterior_samples, const Simulator& predictive,
                                     const Eigen::MatrixXcd& reference, const PPCOptions& opts);

struct ClassifierConfig {
    std::vector<int> hidden{100, 100};
    int epochs{100};
    int batch_size{100};
    double learning_rate{1e-3};
    /// Held-out share for early stopping; 0 trains on everything for `epochs`.
    double validation_fraction{0.1};
    int patience{10};
};

/// Fully connected ReLU network with a logistic output, trained by Adam on
/// binary cross-entropy. Keeps the weights of the epoch with the lowest
/// held-out loss.
class Classifier {
public:
    Classifier() = default;
    /// features: one column per example; labels in {0, 1}.
    static Classifier fit(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels, const ClassifierConfig& cfg,
                          std::uint64_t seed);
    Eigen::VectorXd predict(const Eigen::MatrixXd& features) const;

private:
    std::vector<Eigen::MatrixXd> w_;
    std::vector<Eigen::VectorXd> b_;
    Eigen::VectorXd mean_, scale_;
};

using PosteriorSampler = std::function<Eigen::MatrixXd(const Eigen::VectorXd& x, Eigen::Index n, std::uint64_t seed)>;
using FeatureMap = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x)>;

struct LC2STOptions {
    std::size_t n_null{100};
    Eigen::Index n_eval{1000};
    /// Null band level for both the CDF band and the statistic threshold.
    double level{0.95};
    int grid_points{101};
    ClassifierConfig classifier;
    std::uint64_t seed{0};
    unsigned workers{1};
};

struct CalibrationReport {
    Eigen::VectorXd grid;  ///< probability abscissa in [0, 1]
    Eigen::VectorXd cdf;   ///< empirical CDF of classifier outputs at the grid
    Eigen::VectorXd null_lower, null_upper;
    double statistic{0};   ///< mean |d - 0.5|
    double threshold{0};   ///< `level` quantile of the null statistics
    std::vector<double> null_statistics;
    bool pass{false};
};

/// Local classifier two-sample test. Class 0 holds the calibration pairs
/// (theta_i, x_i), class 1 holds (sampler(x_i), x_i). Each report describes
/// the classifier's outputs on sampler draws at one observation.
std::vector<CalibrationReport> lc2st(const Eigen::MatrixXd& cal_theta, const Eigen::MatrixXd& cal_x,
                                     const std::vector<Eigen::VectorXd>& observations, const PosteriorSampler& sampler,
                                     const FeatureMap& features, const LC2STOptions& opts);

/// Flow-backed sampler and features (bijected theta stacked on the flow's embedding of x).
PosteriorSampler flow_sampler(const Flow& model);
FeatureMap flow_features(const Flow& model);

/// Wraps a sampler so that every draw moves by `fraction` of the prior width
/// in each coordinate, reflected back into the box.
PosteriorSampler shifted_sampler(PosteriorSampler base, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                 double fraction = 0.25);

void write_calibration_csv(const std::filesystem::path& path, const std::vector<CalibrationReport>& reports);

} // namespace roomsbi

#endif // ROOMSBI_DIAGNOSTICS_HPP
