#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include <Eigen/Eigenvalues>

#include "roomsbi/helmholtz.hpp"
#include "roomsbi/random.hpp"

using namespace roomsbi;

namespace {

SurfaceImpedances uniform_impedance(Complex z) {
    SurfaceImpedances out;
    out.fill(z);
    return out;
}

std::shared_ptr<const HexMesh> shared_mesh(const RoomSpec& room, MeshOptions opts = {}) {
    return std::make_shared<const HexMesh>(build_mesh(room, opts));
}

std::vector<Vector3> points_away_from_source(const RoomSpec& room, std::size_t n, double min_r,
                                             std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Vector3> pts;
    while (pts.size() < n) {
        const Vector3 x(rng.uniform() * room.Lx, rng.uniform() * room.Ly, rng.uniform() * room.Lz);
        if ((x - room.source_position).norm() > min_r) pts.push_back(x);
    }
    return pts;
}

/// Relative L2 deviation of the FEM field from the modal oracle at `pts`.
double oracle_deviation(const RoomSpec& room, const SystemMatrices& mats,
                        const std::vector<Vector3>& pts, double f) {
    const auto sol = solve_frequency(mats, room, uniform_impedance(1e6), f);
    double num = 0, den = 0;
    for (const auto& x : pts) {
        const Complex fem = interpolate(*mats.mesh, sol.pressure, locate_point(*mats.mesh, x));
        const Complex ref = analytic_rigid_box_response_converged(room, x, f, 1e-8);
        num += std::norm(fem - ref);
        den += std::norm(ref);
    }
    return std::sqrt(num / den);
}

RoomSpec unit_cube() {
    RoomSpec room;
    room.Lx = room.Ly = room.Lz = 1.0;
    room.source_position = Vector3(0.3, 0.4, 0.6);
    return room;
}

} // namespace

TEST_CASE("element matrices of the unit cube") {
    const auto m = element_mass(Vector3(1, 1, 1));
    for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) {
            const int differing = std::popcount(static_cast<unsigned>(a ^ b));
            const double expected = std::array{1.0 / 27, 1.0 / 54, 1.0 / 108, 1.0 / 216}[differing];
            CHECK(m(a, b) == doctest::Approx(expected).epsilon(1e-14));
        }
    const auto k = element_stiffness(Vector3(1, 1, 1));
    CHECK(k(0, 0) == doctest::Approx(1.0 / 3));
    CHECK(k(0, 7) == doctest::Approx(-1.0 / 12));
    CHECK((k * Eigen::Matrix<double, 8, 1>::Ones()).norm() < 1e-14);
    CHECK(face_mass(1.0).sum() == doctest::Approx(1.0));

    // Assembled single-element mesh reproduces the element matrices.
    const RoomSpec cube = unit_cube();
    const auto mats = assemble(shared_mesh(cube, {.elements_per_wavelength = 4, .f_max = 80}));
    REQUIRE(mats.size() == 8);
    CHECK((Eigen::MatrixXd(mats.mass) - m).norm() < 1e-15);
    CHECK((Eigen::MatrixXd(mats.stiffness) - k).norm() < 1e-15);
}

TEST_CASE("assembled matrix invariants") {
    const RoomSpec room;
    const auto mesh = shared_mesh(room, {.elements_per_wavelength = 4, .f_max = 250});
    const auto mats = assemble(mesh);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(mats.size());

    CHECK((mats.stiffness * ones).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(ones.dot(mats.mass * ones) == doctest::Approx(room.volume()).epsilon(1e-10));
    CHECK(Eigen::SparseMatrix<double>(mats.stiffness - Eigen::SparseMatrix<double>(mats.stiffness.transpose())).norm() == 0.0);
    CHECK(Eigen::SparseMatrix<double>(mats.mass - Eigen::SparseMatrix<double>(mats.mass.transpose())).norm() == 0.0);

    const Eigen::Vector3d e = room.extent();
    const std::array<double, 6> areas{e.y() * e.z(), e.y() * e.z(), e.x() * e.z(),
                                      e.x() * e.z(), e.x() * e.y(), e.x() * e.y()};
    for (int s = 0; s < kNumSurfaces; ++s) {
        const auto& b = mats.boundary[s];
        CHECK(ones.dot(b * ones) == doctest::Approx(areas[s]).epsilon(1e-10));
        const int axis = s / 2;
        const double plane = (s % 2) ? e[axis] : 0.0;
        for (int col = 0; col < b.outerSize(); ++col)
            for (Eigen::SparseMatrix<double>::InnerIterator it(b, col); it; ++it) {
                REQUIRE(mesh->nodes(axis, it.row()) == plane);
                REQUIRE(mesh->nodes(axis, it.col()) == plane);
            }
    }

    SUBCASE("definiteness on a small grid") {
        const auto small = assemble(shared_mesh(room, {.elements_per_wavelength = 4, .f_max = 100}));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ks{Eigen::MatrixXd(small.stiffness)};
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ms{Eigen::MatrixXd(small.mass)};
        const auto& kev = ks.eigenvalues();
        CHECK(std::abs(kev[0]) < 1e-12);
        CHECK(kev[1] > 1e-6);
        CHECK(ms.eigenvalues()[0] > 0);
    }
}

TEST_CASE("solver basics") {
    const RoomSpec room;
    const auto mats = assemble(shared_mesh(room));
    const auto z = surface_impedances(ReferenceSet::benchmark().theta(), 140.0);

    SUBCASE("zero source gives zero field") {
        const auto sol = solve_frequency(mats, room, z, 140.0, {.source_scale = 0.0});
        CHECK(sol.pressure.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("residual contract and direct-solver agreement") {
        const auto sep = solve_frequency(mats, room, z, 140.0);
        CHECK(sep.residual <= 1e-10);
        CHECK(relative_residual(mats, room, z, 140.0, sep.pressure) <= 1e-10);
        const auto lu = solve_frequency(mats, room, z, 140.0, {.solver = SolverKind::SparseLU});
        CHECK(lu.residual <= 1e-10);
        CHECK((sep.pressure - lu.pressure).norm() <= 1e-9 * lu.pressure.norm());
    }
    SUBCASE("absorbed power is positive for passive walls") {
        const PriorSpec prior = PriorSpec::benchmark();
        for (std::uint64_t seed = 0; seed < 5; ++seed)
            for (double f : {63.0, 200.0, 450.0}) {
                const auto zs = surface_impedances(sample_prior(prior, seed), f);
                const auto sol = solve_frequency(mats, room, zs, f);
                CHECK(absorbed_power(mats, zs, 2 * std::numbers::pi * f / room.c, sol.pressure) > 0);
            }
    }
    SUBCASE("input validation") {
        CHECK_THROWS_AS(solve_frequency(mats, room, z, 0.0), DomainError);
        auto bad = z;
        bad[2] = Complex(-0.1, 1.0);
        CHECK_THROWS_AS(solve_frequency(mats, room, bad, 100.0), ValidationError);
        bad[2] = Complex(0.0, 0.0);
        CHECK_THROWS_AS(solve_frequency(mats, room, bad, 100.0), ValidationError);
    }
}

TEST_CASE("first axial resonance of a near-rigid room") {
    const RoomSpec room;
    const auto mats = assemble(shared_mesh(room));
    const auto corner = locate_point(*mats.mesh, Vector3::Zero());
    double best_f = 0, best = 0;
    for (double f = 75.0; f <= 90.0; f += 0.05) {
        const auto sol = solve_frequency(mats, room, uniform_impedance(1e6), f);
        const double a = std::abs(interpolate(*mats.mesh, sol.pressure, corner));
        if (a > best) best = a, best_f = f;
    }
    const double expected = 82.65060240963855;  // c / (2 Lz)
    CHECK(std::abs(best_f - expected) < 0.02 * expected);
}

TEST_CASE("modal oracle") {
    const RoomSpec room;
    const Vector3 x(0.7, 0.2, 0.4);

    SUBCASE("reciprocity") {
        RoomSpec swapped = room;
        swapped.source_position = x;
        const Complex a = analytic_rigid_box_response(room, x, 124.0, 64);
        const Complex b = analytic_rigid_box_response(swapped, room.source_position, 124.0, 64);
        CHECK(std::abs(a - b) < 1e-10 * std::abs(a));
    }
    SUBCASE("cutoff doubling") {
        for (double f : {41.3, 124.0, 218.9, 475.5}) {
            const Complex a = analytic_rigid_box_response(room, x, f, 16);
            const Complex b = analytic_rigid_box_response(room, x, f, 32);
            CHECK(std::abs(a - b) < 1e-3 * std::abs(b));
        }
    }
    SUBCASE("compressibility regime far below the first resonance") {
        // At 20 Hz the (0,0,1) mode still adds about 12% spatial variation, so
        // the check runs an octave lower.
        const auto pts = points_away_from_source(room, 40, 1.0, 3);
        std::vector<Complex> vals;
        Complex mean{0};
        for (const auto& p : pts) {
            vals.push_back(analytic_rigid_box_response_converged(room, p, 10.0));
            mean += vals.back() / static_cast<double>(pts.size());
        }
        for (const auto& v : vals) CHECK(std::abs(v - mean) < 0.05 * std::abs(mean));
        // Uniform pressure of a compressed volume: i rho c^2 Q / (w V).
        const double w = 2 * std::numbers::pi * 10.0;
        const Complex lumped(0, room.rho0 * room.c * room.c * room.source_volume_flow / (w * room.volume()));
        CHECK(std::abs(mean - lumped) < 0.15 * std::abs(lumped));
    }
    SUBCASE("resonance proximity is rejected") {
        CHECK_THROWS_AS(analytic_rigid_box_response(room, x, 82.65, 16), SolverError);
        CHECK_THROWS_AS(analytic_rigid_box_response(room, x, 82.4, 16), SolverError);
        CHECK_NOTHROW(analytic_rigid_box_response(room, x, 81.9, 16));
    }
    SUBCASE("eigenfrequencies") {
        const auto f = rigid_box_eigenfrequencies(room, 200.0);
        REQUIRE(f.size() >= 3);
        CHECK(f[0] == 0.0);
        CHECK(f[1] == doctest::Approx(82.65060240963855).epsilon(1e-14));
        CHECK(std::is_sorted(f.begin(), f.end()));
    }
}

TEST_CASE("FEM against the modal oracle at 10 elements per wavelength") {
    const RoomSpec room;
    const auto mats = assemble(shared_mesh(room));
    const auto pts = points_away_from_source(room, 10, 0.3, 21);
    for (double f : {41.3, 124.0, 218.9}) {
        const double dev = oracle_deviation(room, mats, pts, f);
        INFO("f = " << f << " Hz, deviation " << dev);
        CHECK(dev < 0.02);
    }
}

TEST_CASE("mesh convergence order") {
    const RoomSpec room;
    const auto pts = points_away_from_source(room, 10, 0.3, 21);
    std::array<double, 3> err{};
    for (int level = 0; level < 3; ++level) {
        const auto mats = assemble(shared_mesh(room, {.refinement = 1 << level, .node_budget = 600000}));
        err[static_cast<std::size_t>(level)] = oracle_deviation(room, mats, pts, 218.9);
    }
    const double rate1 = std::log2(err[0] / err[1]);
    const double rate2 = std::log2(err[1] / err[2]);
    INFO("errors " << err[0] << ", " << err[1] << ", " << err[2]);
    CHECK(rate1 >= 1.7);
    CHECK(rate2 >= 1.7);
}

TEST_CASE("simulator") {
    const RoomSpec room;
    const auto mesh = shared_mesh(room);
    const auto obs = select_observation_points(room, {.seed = 2});
    const auto freqs = sixth_octave_centres();
    const Simulator sim(room, mesh, obs.points, freqs);
    const ThetaVector theta = ReferenceSet::benchmark().theta();

    SUBCASE("shape, determinism and call count") {
        const auto a = sim.simulate(theta);
        CHECK(a.size() == 988);
        CHECK(a.n_points == 26);
        CHECK(std::isinf(a.snr_db));
        const auto b = sim.simulate(theta);
        CHECK(a.values == b.values);
        CHECK(sim.calls() == 2);
        const auto fields = sim.simulate_fields(theta);
        CHECK(a.at(3, 7) == fields(7, 3));
        CHECK(a.values[ObservationVector::index(3, 7, 26, 1)] == fields(7, 3).imag());
    }
    SUBCASE("linearity in the source strength") {
        RoomSpec loud = room;
        loud.source_volume_flow *= 2;
        const auto a = simulate_observation(theta, room, mesh, obs, freqs);
        const auto b = simulate_observation(theta, loud, mesh, obs, freqs);
        CHECK(b.values == 2.0 * a.values);
    }
    SUBCASE("frequency order does not matter") {
        std::vector<double> rev(freqs.rbegin(), freqs.rend());
        const Simulator sim_rev(room, mesh, obs.points, rev);
        const auto a = sim.simulate_fields(theta);
        const auto b = sim_rev.simulate_fields(theta);
        CHECK(a == b.rowwise().reverse());
    }
    SUBCASE("per-frequency errors name the frequency") {
        const ThetaVector zero = ThetaVector::Zero();
        const Simulator bad(room, mesh, obs.points, {82.65060240963855});
        try {
            (void)bad.simulate(zero);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("82.65") != std::string::npos);
        }
    }
}

TEST_CASE("noise model") {
    const RoomSpec room;
    const auto mesh = shared_mesh(room);
    const auto obs = select_observation_points(room, {.n = 6, .seed = 9});
    const std::vector<double> freqs{71.0, 140.0, 400.0};
    const auto clean = simulate_observation(ReferenceSet::benchmark().theta(), room, mesh, obs, freqs);

    CHECK(add_noise(clean, std::numeric_limits<double>::infinity(), 1).values == clean.values);
    CHECK(add_noise(clean, 20, 4).values == add_noise(clean, 20, 4).values);
    CHECK(add_noise(clean, 20, 4).values != add_noise(clean, 20, 5).values);
    CHECK(add_noise(clean, 20, 4).snr_db == 20);
    CHECK_THROWS_AS(add_noise(clean, std::nan(""), 1), ValidationError);

    SUBCASE("empirical SNR per frequency") {
        for (double snr : {10.0, 30.0}) {
            std::vector<double> noise_power(freqs.size(), 0.0), signal_power(freqs.size(), 0.0);
            for (std::uint64_t r = 0; r < 1000; ++r) {
                const auto noisy = add_noise(clean, snr, mix_seed(77, r));
                for (std::size_t f = 0; f < freqs.size(); ++f)
                    for (std::size_t j = 0; j < obs.size(); ++j)
                        noise_power[f] += std::norm(noisy.at(f, j) - clean.at(f, j));
            }
            for (std::size_t f = 0; f < freqs.size(); ++f) {
                for (std::size_t j = 0; j < obs.size(); ++j) signal_power[f] += std::norm(clean.at(f, j));
                const double measured = 10 * std::log10(signal_power[f] / (noise_power[f] / 1000.0));
                CHECK(std::abs(measured - snr) < 0.5);
            }
        }
    }
    SUBCASE("zero mean") {
        const std::size_t n = 10000;
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(clean.size());
        Eigen::VectorXd sum2 = Eigen::VectorXd::Zero(clean.size());
        for (std::uint64_t r = 0; r < n; ++r) {
            const Eigen::VectorXd d = add_noise(clean, 20, mix_seed(5, r)).values - clean.values;
            sum += d;
            sum2 += d.cwiseProduct(d);
        }
        const Eigen::VectorXd mean = sum / static_cast<double>(n);
        const Eigen::VectorXd se = (sum2 / static_cast<double>(n) - mean.cwiseProduct(mean)).cwiseSqrt() /
                                   std::sqrt(static_cast<double>(n));
        for (Eigen::Index i = 0; i < mean.size(); ++i) CHECK(std::abs(mean[i]) < 3 * se[i]);
    }
}

TEST_CASE("field csv export") {
    const RoomSpec room;
    const auto mats = assemble(shared_mesh(room, {.elements_per_wavelength = 4, .f_max = 100}));
    const auto sol = solve_frequency(mats, room, uniform_impedance({2.0, -1.0}), 90.0);
    const auto path = std::filesystem::temp_directory_path() / "roomsbi_field_test.csv";
    write_field_csv(path, *mats.mesh, sol);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "x,y,z,re_p,im_p");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) rows += !line.empty();
    CHECK(rows == static_cast<std::size_t>(mats.size()));
    std::filesystem::remove(path);
}
