#include "roomsbi/impedance.hpp"

#include <algorithm>

#include "roomsbi/random.hpp"

namespace roomsbi {

ImpedanceParams surface_params(const ThetaVector& theta, int surface) {
    const int o = surface * kParamsPerSurface;
    return {theta[o], theta[o + 1], theta[o + 2], theta[o + 3]};
}

std::array<ImpedanceParams, kNumSurfaces> unflatten(const ThetaVector& theta) {
    std::array<ImpedanceParams, kNumSurfaces> out;
    for (int s = 0; s < kNumSurfaces; ++s) out[s] = surface_params(theta, s);
    return out;
}

ThetaVector flatten(const std::array<ImpedanceParams, kNumSurfaces>& surfaces) {
    ThetaVector theta;
    for (int s = 0; s < kNumSurfaces; ++s) {
        const int o = s * kParamsPerSurface;
        theta[o] = surfaces[s].R;
        theta[o + 1] = surfaces[s].K;
        theta[o + 2] = surfaces[s].G;
        theta[o + 3] = surfaces[s].gamma;
    }
    return theta;
}

std::array<std::complex<double>, kNumSurfaces> surface_impedances(const ThetaVector& theta,
                                                                   double freq_hz) {
    std::array<std::complex<double>, kNumSurfaces> z;
    for (int s = 0; s < kNumSurfaces; ++s) z[s] = eval_impedance(surface_params(theta, s), freq_hz);
    return z;
}

PriorSpec PriorSpec::benchmark() {
    PriorSpec p;
    const std::array<double, 4> lo_a{0.05, 0.10, 0.005, -0.50};
    const std::array<double, 4> hi_a{0.50, 1.50, 0.10, 0.00};
    const std::array<double, 4> lo_b{0.10, 0.01, 0.01, -0.70};
    const std::array<double, 4> hi_b{2.00, 1.00, 0.60, -0.20};
    for (int s = 0; s < kNumSurfaces; ++s) {
        const auto& lo = s < 2 ? lo_a : lo_b;
        const auto& hi = s < 2 ? hi_a : hi_b;
        for (int j = 0; j < kParamsPerSurface; ++j) {
            p.lower[s * kParamsPerSurface + j] = lo[j];
            p.upper[s * kParamsPerSurface + j] = hi[j];
        }
    }
    return p;
}

void PriorSpec::validate(bool allow_degenerate) const {
    for (int i = 0; i < kThetaDim; ++i) {
        if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]))
            throw ValidationError("prior bound " + std::to_string(i) + " is not finite");
        const bool ok = allow_degenerate ? lower[i] <= upper[i] : lower[i] < upper[i];
        if (!ok)
            throw ValidationError("prior component " + std::to_string(i) +
                                  " requires lower < upper");
    }
    // Every point of the box must be a valid impedance parameter set.
    for (int s = 0; s < kNumSurfaces; ++s) {
        roomsbi::validate(surface_params(lower, s));
        roomsbi::validate(surface_params(upper, s));
    }
}

bool PriorSpec::contains(const ThetaVector& theta) const {
    return (theta.array() >= lower.array()).all() && (theta.array() <= upper.array()).all();
}

ReferenceSet ReferenceSet::benchmark() {
    return {{{{0.15, 0.85, 0.015, -0.20},
              {0.25, 0.75, 0.020, -0.15},
              {1.00, 0.40, 0.100, -0.50},
              {0.70, 0.55, 0.100, -0.55},
              {1.20, 0.40, 0.200, -0.50},
              {0.80, 0.40, 0.400, -0.55}}}};
}

ThetaVector sample_prior(const PriorSpec& prior, std::uint64_t seed) {
    prior.validate(true);
    Rng rng(seed);
    ThetaVector theta;
    for (int i = 0; i < kThetaDim; ++i)
        theta[i] = prior.lower[i] + rng.uniform() * (prior.upper[i] - prior.lower[i]);
    // Guard against rounding up to the open upper end.
    return theta.cwiseMin(prior.upper).cwiseMax(prior.lower);
}

Eigen::MatrixXd sample_prior(const PriorSpec& prior, std::size_t n, std::uint64_t seed) {
    Eigen::MatrixXd out(kThetaDim, static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j)
        out.col(static_cast<Eigen::Index>(j)) = sample_prior(prior, mix_seed(seed, j));
    return out;
}

double empirical_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ValidationError("quantile of empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double t = pos - static_cast<double>(lo);
    return values[lo] + t * (values[hi] - values[lo]);
}

PriorBands propagate_prior(const PriorSpec& prior, std::span<const double> freqs,
                           std::size_t n_draws, std::uint64_t seed) {
    if (freqs.empty()) throw ValidationError("propagate_prior: empty frequency list");
    if (n_draws < 1000) throw ValidationError("propagate_prior: n_draws must be >= 1000");
    prior.validate(true);

    const Eigen::MatrixXd draws = sample_prior(prior, n_draws, seed);
    PriorBands bands;
    bands.freqs.assign(freqs.begin(), freqs.end());
    const auto nf = static_cast<Eigen::Index>(freqs.size());
    const auto np = static_cast<Eigen::Index>(PriorBands::kPercentiles.size());

    std::vector<double> re(n_draws), im(n_draws);
    for (int s = 0; s < kNumSurfaces; ++s) {
        bands.re[s].resize(np, nf);
        bands.im[s].resize(np, nf);
        for (Eigen::Index f = 0; f < nf; ++f) {
            for (std::size_t j = 0; j < n_draws; ++j) {
                const auto z = eval_impedance(
                    surface_params(draws.col(static_cast<Eigen::Index>(j)), s), freqs[f]);
                re[j] = z.real();
                im[j] = z.imag();
            }
            for (Eigen::Index p = 0; p < np; ++p) {
                const double q = PriorBands::kPercentiles[p] / 100.0;
                bands.re[s](p, f) = empirical_quantile(re, q);
                bands.im[s](p, f) = empirical_quantile(im, q);
            }
        }
    }
    return bands;
}

std::vector<double> sixth_octave_centres() {
    return {63, 71, 80, 90, 100, 112, 125, 140, 160, 180,
            200, 224, 250, 280, 315, 355, 400, 450, 500};
}

} // namespace roomsbi
