#include "roomsbi/helmholtz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>
#include <unsupported/Eigen/KroneckerProduct>

#include "roomsbi/random.hpp"

namespace roomsbi {

namespace {

constexpr double kPi = std::numbers::pi;
const Complex kI{0.0, 1.0};

Eigen::Matrix2d line_stiffness(double h) {
    Eigen::Matrix2d k;
    k << 1, -1, -1, 1;
    return k / h;
}

Eigen::Matrix2d line_mass(double h) {
    Eigen::Matrix2d m;
    m << 2, 1, 1, 2;
    return m * (h / 6.0);
}

AxisMatrices axis_matrices(int n_elements, double h) {
    const int n = n_elements + 1;
    AxisMatrices ax{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    const Eigen::Matrix2d k = line_stiffness(h);
    const Eigen::Matrix2d m = line_mass(h);
    for (int e = 0; e < n_elements; ++e) {
        ax.stiffness.block<2, 2>(e, e) += k;
        ax.mass.block<2, 2>(e, e) += m;
    }
    return ax;
}

double wavenumber(const RoomSpec& room, double freq_hz) { return 2.0 * kPi * freq_hz / room.c; }

std::array<Complex, kNumSurfaces> wall_coefficients(const SurfaceImpedances& z, double k) {
    std::array<Complex, kNumSurfaces> alpha;
    for (int s = 0; s < kNumSurfaces; ++s) alpha[s] = -kI * k / z[s];
    return alpha;
}

void check_impedances(const SurfaceImpedances& z) {
    for (int s = 0; s < kNumSurfaces; ++s) {
        if (!std::isfinite(z[s].real()) || !std::isfinite(z[s].imag()) || z[s] == Complex(0))
            throw ValidationError("wall impedance Z" + std::to_string(s + 1) + " must be finite and nonzero");
        if (z[s].real() < 0)
            throw ValidationError("wall impedance Z" + std::to_string(s + 1) + " is not passive (Re < 0)");
    }
}

Eigen::SparseMatrix<Complex> system_matrix(const SystemMatrices& mats, const SurfaceImpedances& z,
                                           double k) {
    const auto alpha = wall_coefficients(z, k);
    Eigen::SparseMatrix<Complex> a = (mats.stiffness - k * k * mats.mass).cast<Complex>();
    for (int s = 0; s < kNumSurfaces; ++s) a += alpha[s] * mats.boundary[s].cast<Complex>();
    return a;
}

/// Diagonalisation of M^-1 (K + D) for one axis: E = S diag(mu) S^-1.
struct AxisModes {
    Eigen::MatrixXcd S;
    Eigen::MatrixXcd T;  // (M S)^-1
    Eigen::VectorXcd mu;
};

AxisModes axis_modes(const AxisMatrices& ax, Complex alpha_lo, Complex alpha_hi) {
    Eigen::MatrixXcd k = ax.stiffness.cast<Complex>();
    const Eigen::Index n = k.rows();
    k(0, 0) += alpha_lo;
    k(n - 1, n - 1) += alpha_hi;
    const Eigen::MatrixXcd m = ax.mass.cast<Complex>();
    const Eigen::MatrixXcd e = m.partialPivLu().solve(k);
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(e);
    if (es.info() != Eigen::Success) throw SolverError("axis eigen decomposition failed");
    AxisModes modes;
    modes.S = es.eigenvectors();
    modes.mu = es.eigenvalues();
    modes.T = (m * modes.S).partialPivLu().inverse();
    return modes;
}

/// In-place application of (Cz (x) Cy (x) Cx) to a tensor stored x-fastest.
void apply_kron(const Eigen::MatrixXcd& cx, const Eigen::MatrixXcd& cy, const Eigen::MatrixXcd& cz,
                Eigen::VectorXcd& v, int nx, int ny, int nz) {
    {
        Eigen::Map<Eigen::MatrixXcd> m(v.data(), nx, static_cast<Eigen::Index>(ny) * nz);
        m = cx * m;
    }
    {
        Eigen::MatrixXcd tmp;
        for (int k = 0; k < nz; ++k) {
            Eigen::Map<Eigen::MatrixXcd> slice(v.data() + static_cast<Eigen::Index>(k) * nx * ny, nx, ny);
            tmp.noalias() = slice * cy.transpose();
            slice = tmp;
        }
    }
    {
        Eigen::Map<Eigen::MatrixXcd> m(v.data(), static_cast<Eigen::Index>(nx) * ny, nz);
        m = m * cz.transpose();
    }
}

Eigen::VectorXcd separable_solve(const SystemMatrices& mats, const SurfaceImpedances& z, double k,
                                 const Eigen::VectorXcd& b) {
    const auto alpha = wall_coefficients(z, k);
    const AxisModes mx = axis_modes(mats.axes[0], alpha[0], alpha[1]);
    const AxisModes my = axis_modes(mats.axes[1], alpha[2], alpha[3]);
    const AxisModes mz = axis_modes(mats.axes[2], alpha[4], alpha[5]);
    const int nx = static_cast<int>(mx.mu.size());
    const int ny = static_cast<int>(my.mu.size());
    const int nz = static_cast<int>(mz.mu.size());

    Eigen::VectorXcd v = b;
    apply_kron(mx.T, my.T, mz.T, v, nx, ny, nz);
    const double k2 = k * k;
    Eigen::Index idx = 0;
    for (int c = 0; c < nz; ++c)
        for (int bb = 0; bb < ny; ++bb) {
            const Complex yz = my.mu[bb] + mz.mu[c] - k2;
            for (int a = 0; a < nx; ++a, ++idx) v[idx] /= mx.mu[a] + yz;
        }
    apply_kron(mx.S, my.S, mz.S, v, nx, ny, nz);
    return v;
}

Eigen::VectorXcd sparse_lu_solve(const SystemMatrices& mats, const SurfaceImpedances& z, double k,
                                 const Eigen::VectorXcd& b) {
    const Eigen::SparseMatrix<Complex> a = system_matrix(mats, z, k);
    Eigen::SparseLU<Eigen::SparseMatrix<Complex>, Eigen::COLAMDOrdering<int>> lu;
    lu.compute(a);
    if (lu.info() != Eigen::Success) throw SolverError("sparse LU factorisation failed: " + lu.lastErrorMessage());
    return lu.solve(b);
}

} // namespace

Eigen::Matrix<double, 8, 8> element_stiffness(const Vector3& h) {
    using Eigen::kroneckerProduct;
    const Eigen::Matrix4d mzy = kroneckerProduct(line_mass(h.z()), line_mass(h.y()));
    const Eigen::Matrix4d mzky = kroneckerProduct(line_mass(h.z()), line_stiffness(h.y()));
    const Eigen::Matrix4d kzmy = kroneckerProduct(line_stiffness(h.z()), line_mass(h.y()));
    Eigen::Matrix<double, 8, 8> ke = kroneckerProduct(mzy, line_stiffness(h.x()));
    ke += kroneckerProduct(mzky, line_mass(h.x()));
    ke += kroneckerProduct(kzmy, line_mass(h.x()));
    return ke;
}

Eigen::Matrix<double, 8, 8> element_mass(const Vector3& h) {
    using Eigen::kroneckerProduct;
    const Eigen::Matrix4d mzy = kroneckerProduct(line_mass(h.z()), line_mass(h.y()));
    return kroneckerProduct(mzy, line_mass(h.x()));
}

Eigen::Matrix4d face_mass(double area) {
    Eigen::Matrix4d f;
    f << 4, 2, 1, 2,
         2, 4, 2, 1,
         1, 2, 4, 2,
         2, 1, 2, 4;
    return f * (area / 36.0);
}

SystemMatrices assemble(std::shared_ptr<const HexMesh> mesh) {
    if (!mesh || mesh->num_elements() == 0) throw ValidationError("assemble: empty mesh");
    SystemMatrices mats;
    mats.mesh = mesh;
    const Eigen::Index n = mesh->num_nodes();
    const auto ke = element_stiffness(mesh->spacing);
    const auto me = element_mass(mesh->spacing);

    std::vector<Eigen::Triplet<double>> tk, tm;
    tk.reserve(static_cast<std::size_t>(mesh->num_elements()) * 64);
    tm.reserve(tk.capacity());
    for (Eigen::Index e = 0; e < mesh->num_elements(); ++e)
        for (int a = 0; a < 8; ++a)
            for (int b = 0; b < 8; ++b) {
                tk.emplace_back(mesh->elements(a, e), mesh->elements(b, e), ke(a, b));
                tm.emplace_back(mesh->elements(a, e), mesh->elements(b, e), me(a, b));
            }
    mats.stiffness.resize(n, n);
    mats.stiffness.setFromTriplets(tk.begin(), tk.end());
    mats.mass.resize(n, n);
    mats.mass.setFromTriplets(tm.begin(), tm.end());

    for (int s = 0; s < kNumSurfaces; ++s) {
        const Eigen::Matrix4d fm = face_mass(mesh->face_area(s));
        std::vector<Eigen::Triplet<double>> tb;
        tb.reserve(mesh->wall_faces[s].size() * 16);
        for (const auto& face : mesh->wall_faces[s])
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) tb.emplace_back(face[a], face[b], fm(a, b));
        mats.boundary[s].resize(n, n);
        mats.boundary[s].setFromTriplets(tb.begin(), tb.end());
    }

    mats.axes[0] = axis_matrices(mesh->nx, mesh->spacing.x());
    mats.axes[1] = axis_matrices(mesh->ny, mesh->spacing.y());
    mats.axes[2] = axis_matrices(mesh->nz, mesh->spacing.z());
    return mats;
}

Eigen::VectorXcd source_vector(const SystemMatrices& mats, const RoomSpec& room, double freq_hz,
                               double scale) {
    const HexMesh& mesh = *mats.mesh;
    Eigen::VectorXcd b = Eigen::VectorXcd::Zero(mats.size());
    const Complex amp = -kI * (2.0 * kPi * freq_hz) * room.rho0 * room.source_volume_flow * scale;
    if (amp == Complex(0)) return b;
    const PointLocation loc = locate_point(mesh, room.source_position);
    const auto n = shape_functions(loc.local);
    for (int a = 0; a < 8; ++a) b[mesh.elements(a, loc.element)] += amp * n[a];
    return b;
}

double relative_residual(const SystemMatrices& mats, const RoomSpec& room,
                         const SurfaceImpedances& z, double freq_hz, const Eigen::VectorXcd& p,
                         double source_scale) {
    const double k = wavenumber(room, freq_hz);
    const auto alpha = wall_coefficients(z, k);
    const Eigen::VectorXcd b = source_vector(mats, room, freq_hz, source_scale);
    Eigen::VectorXcd r = mats.stiffness * p - (k * k) * (mats.mass * p) - b;
    for (int s = 0; s < kNumSurfaces; ++s) r += alpha[s] * (mats.boundary[s] * p);
    const double bn = b.norm();
    if (bn == 0) return r.norm();
    return r.norm() / bn;
}

FieldSolution solve_frequency(const SystemMatrices& mats, const RoomSpec& room,
                              const SurfaceImpedances& z, double freq_hz, const SolveOptions& opts) {
    if (!std::isfinite(freq_hz) || !(freq_hz > 0)) throw DomainError("solve_frequency: frequency must be positive");
    check_impedances(z);
    const double k = wavenumber(room, freq_hz);
    FieldSolution sol;
    sol.frequency = freq_hz;
    const Eigen::VectorXcd b = source_vector(mats, room, freq_hz, opts.source_scale);
    if (b.isZero(0)) {
        sol.pressure = Eigen::VectorXcd::Zero(mats.size());
        return sol;
    }

    bool separable = opts.solver == SolverKind::Separable;
    if (separable) {
        sol.pressure = separable_solve(mats, z, k, b);
        sol.residual = relative_residual(mats, room, z, freq_hz, sol.pressure, opts.source_scale);
        // Nearly defective axis pencils lose accuracy; the factorisation path
        // does not depend on eigenvector conditioning.
        if (!(sol.residual <= opts.tolerance)) separable = false;
    }
    if (!separable) {
        sol.pressure = sparse_lu_solve(mats, z, k, b);
        sol.residual = relative_residual(mats, room, z, freq_hz, sol.pressure, opts.source_scale);
    }
    if (!(sol.residual <= opts.tolerance)) {
        std::ostringstream msg;
        msg << "linear solve at " << freq_hz << " Hz failed: relative residual " << sol.residual;
        throw SolverError(msg.str());
    }
    return sol;
}

double absorbed_power(const SystemMatrices& mats, const SurfaceImpedances& z, double wavenumber,
                      const Eigen::VectorXcd& p) {
    double total = 0;
    for (int s = 0; s < kNumSurfaces; ++s) {
        const double energy = p.dot(mats.boundary[s] * p).real();
        total += 0.5 * wavenumber * (1.0 / z[s]).real() * energy;
    }
    return total;
}

Complex interpolate(const HexMesh& mesh, const Eigen::VectorXcd& field, const PointLocation& loc) {
    const auto n = shape_functions(loc.local);
    Complex v = 0;
    for (int a = 0; a < 8; ++a) v += n[a] * field[mesh.elements(a, loc.element)];
    return v;
}

std::vector<double> rigid_box_eigenfrequencies(const RoomSpec& room, double f_max) {
    std::vector<double> out;
    const double s = 2.0 * f_max / room.c;
    const int lx = static_cast<int>(s * room.Lx), ly = static_cast<int>(s * room.Ly),
              lz = static_cast<int>(s * room.Lz);
    for (int l = 0; l <= lx; ++l)
        for (int m = 0; m <= ly; ++m)
            for (int n = 0; n <= lz; ++n) {
                const double f = 0.5 * room.c *
                                 std::sqrt(std::pow(l / room.Lx, 2) + std::pow(m / room.Ly, 2) +
                                           std::pow(n / room.Lz, 2));
                if (f <= f_max) out.push_back(f);
            }
    std::sort(out.begin(), out.end());
    return out;
}

Complex analytic_rigid_box_response(const RoomSpec& room, const Vector3& x, double freq_hz,
                                    int mode_cutoff) {
    if (!(freq_hz > 0)) throw DomainError("analytic response: frequency must be positive");
    if (mode_cutoff < 0) throw ValidationError("mode cutoff must be non-negative");
    if (!room.contains(x)) throw DomainError("analytic response: receiver outside the room");
    for (double fe : rigid_box_eigenfrequencies(room, freq_hz + 0.5)) {
        if (std::abs(fe - freq_hz) < 0.5) {
            std::ostringstream msg;
            msg << "analytic response is ill-conditioned: " << freq_hz
                << " Hz lies within 0.5 Hz of the eigenfrequency " << fe << " Hz";
            throw SolverError(msg.str());
        }
    }

    const Vector3 src = room.source_position;
    const Vector3 ext = room.extent();
    int axis = 0;
    for (int a = 1; a < 3; ++a)
        if (std::abs(x[a] - src[a]) > std::abs(x[axis] - src[axis])) axis = a;
    const int t1 = (axis + 1) % 3, t2 = (axis + 2) % 3;
    const double L = ext[axis];
    const double lo = std::min(x[axis], src[axis]);
    const double hi = std::max(x[axis], src[axis]);
    const double k = wavenumber(room, freq_hz);

    // 1D Green's function of g'' + kappa^2 g = -delta with Neumann ends.
    const auto green_1d = [&](double kappa2) -> double {
        if (kappa2 > 0) {
            const double kap = std::sqrt(kappa2);
            return -std::cos(kap * lo) * std::cos(kap * (L - hi)) / (kap * std::sin(kap * L));
        }
        const double mu = std::sqrt(-kappa2);
        // cosh(mu lo) cosh(mu (L-hi)) / (mu sinh(mu L)) without overflow.
        const double a = lo, b = L - hi;
        const double num = std::exp(mu * (a + b - L)) * (1 + std::exp(-2 * mu * a)) * (1 + std::exp(-2 * mu * b)) / 4;
        const double den = mu * (1 - std::exp(-2 * mu * L)) / 2;
        return num / den;
    };

    double g = 0;
    // Sum the smallest terms first for a cutoff-independent rounding pattern.
    for (int m = mode_cutoff; m >= 0; --m) {
        const double km = m * kPi / ext[t1];
        const double cm = std::cos(km * x[t1]) * std::cos(km * src[t1]) * (m == 0 ? 1.0 : 2.0) / ext[t1];
        for (int n = mode_cutoff; n >= 0; --n) {
            const double kn = n * kPi / ext[t2];
            const double cn = std::cos(kn * x[t2]) * std::cos(kn * src[t2]) * (n == 0 ? 1.0 : 2.0) / ext[t2];
            g += cm * cn * green_1d(k * k - km * km - kn * kn);
        }
    }
    return -kI * (2.0 * kPi * freq_hz) * room.rho0 * room.source_volume_flow * g;
}

Complex analytic_rigid_box_response_converged(const RoomSpec& room, const Vector3& x, double freq_hz,
                                              double rel_tol, int initial_cutoff) {
    int cutoff = std::max(1, initial_cutoff);
    Complex prev = analytic_rigid_box_response(room, x, freq_hz, cutoff);
    for (int iter = 0; iter < 12; ++iter) {
        cutoff *= 2;
        const Complex next = analytic_rigid_box_response(room, x, freq_hz, cutoff);
        if (std::abs(next - prev) <= rel_tol * std::abs(next)) return next;
        prev = next;
    }
    throw SolverError("modal sum did not converge; receiver too close to the source");
}

namespace {

std::string frequency_tag(double f) {
    std::ostringstream msg;
    msg << "[f = " << f << " Hz] ";
    return msg.str();
}

} // namespace

Simulator::Simulator(const RoomSpec& room_, std::shared_ptr<const HexMesh> mesh,
                     const std::vector<Vector3>& points, std::vector<double> freqs_,
                     SolveOptions solve_)
    : room(room_), mats(assemble(std::move(mesh))), freqs(std::move(freqs_)), solve(solve_) {
    room.validate();
    if (freqs.empty()) throw ValidationError("simulator needs at least one frequency");
    for (double f : freqs)
        if (!(f > 0) || !std::isfinite(f)) throw ValidationError("simulator frequencies must be positive");
    locations.reserve(points.size());
    for (const auto& p : points) locations.push_back(locate_point(*mats.mesh, p));
}

Eigen::MatrixXcd Simulator::simulate_fields(const ThetaVector& theta) const {
    calls_.fetch_add(1);
    Eigen::MatrixXcd out(static_cast<Eigen::Index>(n_points()), static_cast<Eigen::Index>(freqs.size()));
    for (std::size_t f = 0; f < freqs.size(); ++f) {
        const auto z = surface_impedances(theta, freqs[f]);
        FieldSolution sol;
        try {
            sol = solve_frequency(mats, room, z, freqs[f], solve);
        } catch (const SolverError& e) {
            throw SolverError(frequency_tag(freqs[f]) + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(frequency_tag(freqs[f]) + e.what());
        }
        for (std::size_t j = 0; j < n_points(); ++j)
            out(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(f)) =
                interpolate(*mats.mesh, sol.pressure, locations[j]);
    }
    return out;
}

ObservationVector Simulator::simulate(const ThetaVector& theta) const {
    const Eigen::MatrixXcd fields = simulate_fields(theta);
    ObservationVector obs;
    obs.freqs = freqs;
    obs.n_points = n_points();
    obs.values.resize(static_cast<Eigen::Index>(output_size()));
    for (std::size_t f = 0; f < freqs.size(); ++f)
        for (std::size_t j = 0; j < n_points(); ++j) {
            const Complex p = fields(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(f));
            obs.values[ObservationVector::index(f, j, n_points(), 0)] = p.real();
            obs.values[ObservationVector::index(f, j, n_points(), 1)] = p.imag();
        }
    return obs;
}

ObservationVector simulate_observation(const ThetaVector& theta, const RoomSpec& room,
                                       std::shared_ptr<const HexMesh> mesh, const ObservationSet& obs,
                                       std::span<const double> freqs) {
    const Simulator sim(room, std::move(mesh), obs.points, {freqs.begin(), freqs.end()});
    return sim.simulate(theta);
}

ObservationVector add_noise(const ObservationVector& data, double snr_db, std::uint64_t seed) {
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
        throw ValidationError("snr_db must be a number or +inf");
    if (snr_db == std::numeric_limits<double>::infinity()) return data;
    ObservationVector out = data;
    out.snr_db = snr_db;
    Rng rng(seed);
    const std::size_t np = data.n_points;
    for (std::size_t f = 0; f < data.freqs.size(); ++f) {
        double power = 0;
        for (std::size_t j = 0; j < np; ++j) power += std::norm(data.at(f, j));
        power /= static_cast<double>(np);
        const double sigma = std::sqrt(power * std::pow(10.0, -snr_db / 10.0) / 2.0);
        for (std::size_t j = 0; j < np; ++j)
            for (int part = 0; part < 2; ++part)
                out.values[ObservationVector::index(f, j, np, part)] += sigma * rng.normal();
    }
    return out;
}

void write_field_csv(const std::filesystem::path& path, const HexMesh& mesh, const FieldSolution& solution) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << "x,y,z,re_p,im_p\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < mesh.num_nodes(); ++i) {
        const auto x = mesh.nodes.col(i);
        out << x.x() << ',' << x.y() << ',' << x.z() << ',' << solution.pressure[i].real() << ','
            << solution.pressure[i].imag() << '\n';
    }
}

} // namespace roomsbi
