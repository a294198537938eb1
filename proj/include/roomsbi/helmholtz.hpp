#ifndef ROOMSBI_HELMHOLTZ_HPP
#define ROOMSBI_HELMHOLTZ_HPP

#include <array>
#include <atomic>
#include <complex>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "roomsbi/geometry.hpp"
#include "roomsbi/impedance.hpp"

namespace roomsbi {

using Complex = std::complex<double>;
using SurfaceImpedances = std::array<Complex, kNumSurfaces>;

/// 1D linear-element matrices along one grid axis.
struct AxisMatrices {
    Eigen::MatrixXd stiffness;
    Eigen::MatrixXd mass;
};

/// Galerkin matrices of the trilinear discretisation.
///
/// On the tensor grid every matrix is a Kronecker product of the 1D factors
/// in `axes`, e.g. mass = Mz (x) My (x) Mx; the boundary matrix of wall x=0 is
/// Mz (x) My (x) e0 e0^T. The separable solver relies on this.
struct SystemMatrices {
    std::shared_ptr<const HexMesh> mesh;
    Eigen::SparseMatrix<double> stiffness;
    Eigen::SparseMatrix<double> mass;
    std::array<Eigen::SparseMatrix<double>, kNumSurfaces> boundary;
    std::array<AxisMatrices, 3> axes;

    Eigen::Index size() const { return mass.rows(); }
};

/// Reference element matrices of an axis-aligned brick with edge lengths h.
Eigen::Matrix<double, 8, 8> element_stiffness(const Vector3& h);
Eigen::Matrix<double, 8, 8> element_mass(const Vector3& h);
/// Bilinear face mass of a rectangle with the given area (corner order as in HexMesh).
Eigen::Matrix4d face_mass(double area);

SystemMatrices assemble(std::shared_ptr<const HexMesh> mesh);

enum class SolverKind { Separable, SparseLU };

struct SolveOptions {
    double tolerance{1e-10};
    SolverKind solver{SolverKind::Separable};
    /// Multiplier on the monopole strength; 0 gives the homogeneous problem.
    double source_scale{1.0};
};

struct FieldSolution {
    Eigen::VectorXcd pressure;
    double frequency{0};
    double residual{0};
};

/// Right-hand side of A p = b for the monopole:
///   b = -i w rho0 Q phi(x_s)
/// so that p ~ -i w rho0 Q exp(ikr) / (4 pi r) near the source (exp(-iwt) convention).
Eigen::VectorXcd source_vector(const SystemMatrices& mats, const RoomSpec& room, double freq_hz,
                               double scale = 1.0);

/// Solves (K - k^2 M - i k sum_s B_s / z_s) p = b for normalized wall impedances z.
FieldSolution solve_frequency(const SystemMatrices& mats, const RoomSpec& room,
                              const SurfaceImpedances& z, double freq_hz,
                              const SolveOptions& opts = {});

/// ||A p - b|| / ||b|| for a candidate field (0 when b = 0 and p = 0).
double relative_residual(const SystemMatrices& mats, const RoomSpec& room,
                         const SurfaceImpedances& z, double freq_hz,
                         const Eigen::VectorXcd& p, double source_scale = 1.0);

/// Time-averaged power absorbed by the walls, sum_s (k/2) Re(1/z_s) p^H B_s p.
double absorbed_power(const SystemMatrices& mats, const SurfaceImpedances& z, double wavenumber,
                      const Eigen::VectorXcd& p);

/// Field value at an arbitrary point by trilinear interpolation.
Complex interpolate(const HexMesh& mesh, const Eigen::VectorXcd& field, const PointLocation& loc);

/// Pressure of a monopole in a rigid box as a modal sum. The sum runs over
/// cosine modes in the two directions transverse to the axis of largest
/// source/receiver separation; the remaining direction uses the closed-form
/// 1D Green's function, which makes the truncation error decay exponentially.
/// `mode_cutoff` is the largest transverse mode index.
Complex analytic_rigid_box_response(const RoomSpec& room, const Vector3& x, double freq_hz,
                                    int mode_cutoff);

/// Same as above, doubling the cutoff from `initial_cutoff` until two
/// successive values agree within `rel_tol`.
Complex analytic_rigid_box_response_converged(const RoomSpec& room, const Vector3& x,
                                              double freq_hz, double rel_tol = 1e-4,
                                              int initial_cutoff = 16);

/// Rigid-box eigenfrequencies c/2 sqrt((l/Lx)^2 + (m/Ly)^2 + (n/Lz)^2) not above f_max, sorted.
std::vector<double> rigid_box_eigenfrequencies(const RoomSpec& room, double f_max);

/// Flattened observation samples, ordering
///   index = 2 * (f * n_points + j) + {0: Re, 1: Im}
/// i.e. frequency-major, then point, then real before imaginary.
struct ObservationVector {
    Eigen::VectorXd values;
    std::vector<double> freqs;
    std::size_t n_points{0};
    /// +inf when no noise was added.
    double snr_db{std::numeric_limits<double>::infinity()};

    Eigen::Index size() const { return values.size(); }
    static Eigen::Index index(std::size_t f, std::size_t point, std::size_t n_points, int part) {
        return static_cast<Eigen::Index>(2 * (f * n_points + point) + static_cast<std::size_t>(part));
    }
    Complex at(std::size_t f, std::size_t point) const {
        return {values[index(f, point, n_points, 0)], values[index(f, point, n_points, 1)]};
    }
};

/// Everything the forward model needs apart from theta.
struct Simulator {
    RoomSpec room;
    SystemMatrices mats;
    std::vector<PointLocation> locations;
    std::vector<double> freqs;
    SolveOptions solve;

    Simulator(const RoomSpec& room, std::shared_ptr<const HexMesh> mesh,
              const std::vector<Vector3>& points, std::vector<double> freqs,
              SolveOptions solve = {});

    std::size_t n_points() const { return locations.size(); }
    std::size_t output_size() const { return 2 * n_points() * freqs.size(); }
    ObservationVector simulate(const ThetaVector& theta) const;
    /// Complex fields at the points, one column per frequency.
    Eigen::MatrixXcd simulate_fields(const ThetaVector& theta) const;
    std::size_t calls() const { return calls_.load(); }

private:
    mutable std::atomic<std::size_t> calls_{0};
};

ObservationVector simulate_observation(const ThetaVector& theta, const RoomSpec& room,
                                       std::shared_ptr<const HexMesh> mesh,
                                       const ObservationSet& obs, std::span<const double> freqs);

/// Adds independent N(0, sigma(f)^2) to every Re and Im entry, with
/// sigma(f)^2 = P(f) 10^(-snr/10) / 2 and P(f) the mean of |p|^2 over points.
/// snr_db = +inf returns the input unchanged.
ObservationVector add_noise(const ObservationVector& data, double snr_db, std::uint64_t seed);

void write_field_csv(const std::filesystem::path& path, const HexMesh& mesh,
                     const FieldSolution& solution);

} // namespace roomsbi

#endif // ROOMSBI_HELMHOLTZ_HPP
