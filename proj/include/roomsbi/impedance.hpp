#ifndef ROOMSBI_IMPEDANCE_HPP
#define ROOMSBI_IMPEDANCE_HPP

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "roomsbi/errors.hpp"

namespace roomsbi {

inline constexpr int kNumSurfaces = 6;
inline constexpr int kParamsPerSurface = 4;
inline constexpr int kThetaDim = kNumSurfaces * kParamsPerSurface;

/// Stacked impedance parameters (R1,K1,G1,g1, ..., R6,K6,G6,g6).
/// Surface s maps to: 0 -> x=0, 1 -> x=Lx, 2 -> y=0, 3 -> y=Ly, 4 -> z=0, 5 -> z=Lz.
using ThetaVector = Eigen::Matrix<double, kThetaDim, 1>;

/// Normalized (Z / rho0 c) impedance of one locally reacting surface:
///   Z(w) = R + K (i w)^-1 + G (i w)^gamma
template <typename Scalar>
struct ImpedanceParamsT {
    Scalar R{0};
    Scalar K{0};
    Scalar G{0};
    Scalar gamma{0};

    bool operator==(const ImpedanceParamsT&) const = default;
};

using ImpedanceParams = ImpedanceParamsT<double>;

template <typename Scalar>
void validate(const ImpedanceParamsT<Scalar>& p) {
    using std::isfinite;
    if (!(isfinite(p.R) && isfinite(p.K) && isfinite(p.G) && isfinite(p.gamma)))
        throw ValidationError("impedance parameters must be finite");
    if (p.R < 0 || p.K < 0 || p.G < 0)
        throw ValidationError("impedance parameters R, K, G must be non-negative");
    if (p.gamma < -1 || p.gamma > 1)
        throw ValidationError("impedance exponent gamma must lie in [-1, 1]");
}

/// Complex normalized impedance at `freq_hz`. Uses the principal branch
/// (i w)^g = w^g (cos(g pi/2) + i sin(g pi/2)) for w > 0.
template <typename Scalar>
std::complex<Scalar> eval_impedance(const ImpedanceParamsT<Scalar>& p, Scalar freq_hz) {
    using std::cos;
    using std::isfinite;
    using std::pow;
    using std::sin;
    if (!isfinite(freq_hz) || !(freq_hz > 0))
        throw DomainError("impedance frequency must be finite and positive");
    validate(p);
    const Scalar pi = std::numbers::pi_v<Scalar>;
    const Scalar omega = Scalar(2) * pi * freq_hz;
    const Scalar frac = pow(omega, p.gamma);
    const Scalar phase = p.gamma * pi / Scalar(2);
    return {p.R + p.G * frac * cos(phase), -p.K / omega + p.G * frac * sin(phase)};
}

ImpedanceParams surface_params(const ThetaVector& theta, int surface);
std::array<ImpedanceParams, kNumSurfaces> unflatten(const ThetaVector& theta);
ThetaVector flatten(const std::array<ImpedanceParams, kNumSurfaces>& surfaces);

/// Normalized impedance of all six surfaces at one frequency.
std::array<std::complex<double>, kNumSurfaces> surface_impedances(const ThetaVector& theta,
                                                                   double freq_hz);

/// Independent uniform priors per component.
struct PriorSpec {
    ThetaVector lower;
    ThetaVector upper;

    /// Bounds used for the cuboid benchmark: {Z1, Z2} share the tighter
    /// low-absorption box, {Z3..Z6} the broad one.
    static PriorSpec benchmark();

    /// Degenerate priors (lower == upper) are allowed when `allow_degenerate`
    /// is set; `sample_prior` then returns the point itself.
    void validate(bool allow_degenerate = false) const;
    bool contains(const ThetaVector& theta) const;
    ThetaVector width() const { return upper - lower; }
    ThetaVector midpoint() const { return 0.5 * (lower + upper); }
};

/// Ground truth of the benchmark.
struct ReferenceSet {
    std::array<ImpedanceParams, kNumSurfaces> surfaces;

    static ReferenceSet benchmark();
    ThetaVector theta() const { return flatten(surfaces); }
};

ThetaVector sample_prior(const PriorSpec& prior, std::uint64_t seed);
/// `n` draws as the columns of a 24 x n matrix, reproducible per seed.
Eigen::MatrixXd sample_prior(const PriorSpec& prior, std::size_t n, std::uint64_t seed);

/// Percentile curves of Re(Z) and Im(Z) for each surface when the prior is
/// pushed through the impedance model.
struct PriorBands {
    static constexpr std::array<double, 5> kPercentiles{5, 25, 50, 75, 95};

    std::vector<double> freqs;
    /// re[s](p, f): percentile p (index into kPercentiles) of Re Z_s at freqs[f].
    std::array<Eigen::MatrixXd, kNumSurfaces> re;
    std::array<Eigen::MatrixXd, kNumSurfaces> im;
};

PriorBands propagate_prior(const PriorSpec& prior, std::span<const double> freqs,
                           std::size_t n_draws, std::uint64_t seed);

/// Linear-interpolated empirical quantile (q in [0,1]) of unsorted data.
double empirical_quantile(std::vector<double> values, double q);

/// Nominal sixth-octave band centres from 63 Hz to 500 Hz.
std::vector<double> sixth_octave_centres();

} // namespace roomsbi

#endif // ROOMSBI_IMPEDANCE_HPP
