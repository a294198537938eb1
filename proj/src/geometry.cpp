#include "roomsbi/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roomsbi/random.hpp"

namespace roomsbi {

bool RoomSpec::contains(const Vector3& x, double tol) const {
    const Vector3 e = extent();
    return (x.array() >= -tol).all() && (x.array() <= e.array() + tol).all();
}

void RoomSpec::validate() const {
    if (!(Lx > 0 && Ly > 0 && Lz > 0)) throw ValidationError("room lengths must be positive");
    if (!(c > 0) || !(rho0 > 0)) throw ValidationError("c and rho0 must be positive");
    if (!std::isfinite(source_volume_flow))
        throw ValidationError("source volume flow must be finite");
    const Vector3 e = extent();
    if (!((source_position.array() > 0).all() && (source_position.array() < e.array()).all()))
        throw ValidationError("source must lie strictly inside the room");
}

double HexMesh::face_area(int tag) const {
    switch (tag / 2) {
    case 0: return spacing.y() * spacing.z();
    case 1: return spacing.x() * spacing.z();
    default: return spacing.x() * spacing.y();
    }
}

std::array<int, 3> base_divisions(const RoomSpec& room, double elements_per_wavelength,
                                  double f_max) {
    if (!(elements_per_wavelength >= 4)) throw ValidationError("elements_per_wavelength must be >= 4");
    if (!(f_max > 0)) throw ValidationError("f_max must be positive");
    const double h_target = room.c / (f_max * elements_per_wavelength);
    const Vector3 e = room.extent();
    std::array<int, 3> n{};
    for (int a = 0; a < 3; ++a) {
        // Tiny slack so exact multiples do not round up an extra element.
        n[a] = std::max(1, static_cast<int>(std::ceil(e[a] / h_target - 1e-12)));
    }
    return n;
}

HexMesh build_mesh(const RoomSpec& room, const MeshOptions& opts) {
    room.validate();
    if (opts.refinement < 1) throw ValidationError("mesh refinement must be >= 1");
    auto n = base_divisions(room, opts.elements_per_wavelength, opts.f_max);
    for (auto& v : n) v *= opts.refinement;

    const std::size_t nodes = static_cast<std::size_t>(n[0] + 1) * (n[1] + 1) * (n[2] + 1);
    if (nodes > opts.node_budget) {
        throw ResourceError("mesh needs " + std::to_string(nodes) + " nodes, budget is " +
                            std::to_string(opts.node_budget));
    }

    HexMesh mesh;
    mesh.nx = n[0];
    mesh.ny = n[1];
    mesh.nz = n[2];
    mesh.extent = room.extent();
    mesh.spacing = mesh.extent.cwiseQuotient(Vector3(n[0], n[1], n[2]));

    mesh.nodes.resize(3, static_cast<Eigen::Index>(nodes));
    for (int k = 0; k <= mesh.nz; ++k)
        for (int j = 0; j <= mesh.ny; ++j)
            for (int i = 0; i <= mesh.nx; ++i) {
                // i * L / n keeps coarse nodes bit-identical inside refined grids.
                mesh.nodes.col(mesh.node_index(i, j, k)) =
                    Vector3(i * mesh.extent.x() / mesh.nx, j * mesh.extent.y() / mesh.ny,
                            k * mesh.extent.z() / mesh.nz);
            }

    mesh.elements.resize(8, static_cast<Eigen::Index>(mesh.nx) * mesh.ny * mesh.nz);
    Eigen::Index e = 0;
    for (int k = 0; k < mesh.nz; ++k)
        for (int j = 0; j < mesh.ny; ++j)
            for (int i = 0; i < mesh.nx; ++i, ++e)
                for (int c = 0; c < 2; ++c)
                    for (int b = 0; b < 2; ++b)
                        for (int a = 0; a < 2; ++a)
                            mesh.elements(a + 2 * b + 4 * c, e) = mesh.node_index(i + a, j + b, k + c);

    auto& wf = mesh.wall_faces;
    for (int k = 0; k < mesh.nz; ++k)
        for (int j = 0; j < mesh.ny; ++j)
            for (int side = 0; side < 2; ++side) {
                const int i = side == 0 ? 0 : mesh.nx;
                wf[side].push_back({mesh.node_index(i, j, k), mesh.node_index(i, j + 1, k),
                                    mesh.node_index(i, j + 1, k + 1), mesh.node_index(i, j, k + 1)});
            }
    for (int k = 0; k < mesh.nz; ++k)
        for (int i = 0; i < mesh.nx; ++i)
            for (int side = 0; side < 2; ++side) {
                const int j = side == 0 ? 0 : mesh.ny;
                wf[2 + side].push_back({mesh.node_index(i, j, k), mesh.node_index(i + 1, j, k),
                                        mesh.node_index(i + 1, j, k + 1), mesh.node_index(i, j, k + 1)});
            }
    for (int j = 0; j < mesh.ny; ++j)
        for (int i = 0; i < mesh.nx; ++i)
            for (int side = 0; side < 2; ++side) {
                const int k = side == 0 ? 0 : mesh.nz;
                wf[4 + side].push_back({mesh.node_index(i, j, k), mesh.node_index(i + 1, j, k),
                                        mesh.node_index(i + 1, j + 1, k), mesh.node_index(i, j + 1, k)});
            }
    return mesh;
}

Eigen::Matrix<double, 8, 1> shape_functions(const Vector3& local) {
    Eigen::Matrix<double, 8, 1> n;
    for (int c = 0; c < 2; ++c)
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) {
                const double fx = a ? 1 + local.x() : 1 - local.x();
                const double fy = b ? 1 + local.y() : 1 - local.y();
                const double fz = c ? 1 + local.z() : 1 - local.z();
                n[a + 2 * b + 4 * c] = 0.125 * fx * fy * fz;
            }
    return n;
}

PointLocation locate_point(const HexMesh& mesh, const Vector3& x) {
    const double tol = 1e-12 * mesh.extent.maxCoeff();
    if (!x.allFinite() || (x.array() < -tol).any() || (x.array() > mesh.extent.array() + tol).any()) {
        std::ostringstream msg;
        msg << "point (" << x.transpose() << ") lies outside the domain";
        throw DomainError(msg.str());
    }
    const std::array<int, 3> n{mesh.nx, mesh.ny, mesh.nz};
    std::array<int, 3> cell{};
    Vector3 local;
    for (int a = 0; a < 3; ++a) {
        const double xc = std::clamp(x[a], 0.0, mesh.extent[a]);
        const double s = xc / mesh.spacing[a];
        cell[a] = std::clamp(static_cast<int>(std::floor(s)), 0, n[a] - 1);
        const double origin = cell[a] * mesh.extent[a] / n[a];
        local[a] = std::clamp(2.0 * (xc - origin) / mesh.spacing[a] - 1.0, -1.0, 1.0);
    }
    const Eigen::Index e = cell[0] + static_cast<Eigen::Index>(mesh.nx) * (cell[1] + static_cast<Eigen::Index>(mesh.ny) * cell[2]);
    return {e, local};
}

Vector3 map_to_global(const HexMesh& mesh, const PointLocation& loc) {
    const auto n = shape_functions(loc.local);
    Vector3 x = Vector3::Zero();
    for (int a = 0; a < 8; ++a) x += n[a] * mesh.nodes.col(mesh.elements(a, loc.element));
    return x;
}

ObservationSet select_observation_points(const RoomSpec& room, const ObservationOptions& opts) {
    room.validate();
    if (opts.n == 0) throw ValidationError("observation count must be positive");
    if (!(opts.min_dist > 0)) throw ValidationError("min_dist must be positive");
    if (!(opts.margin >= 0)) throw ValidationError("margin must be non-negative");
    const Vector3 inner = room.extent().array() - 2.0 * opts.margin;
    if ((inner.array() <= 0).any())
        throw InfeasibleError("wall margin leaves no admissible volume");

    // Necessary packing condition: the spheres of radius min_dist/2 centred in
    // the shrunken box must fit into it (grown by the radius) at Kepler density.
    const double r = 0.5 * opts.min_dist;
    const double sphere = 4.0 / 3.0 * std::numbers::pi * r * r * r;
    const double avail = (inner.array() + 2 * r).prod() * std::numbers::pi / std::sqrt(18.0);
    const auto infeasible = [&] {
        return InfeasibleError("cannot place n=" + std::to_string(opts.n) +
                               " observation points with min_dist=" + std::to_string(opts.min_dist));
    };
    if (static_cast<double>(opts.n) * sphere > avail) throw infeasible();

    Rng rng(opts.seed);
    ObservationSet set;
    set.min_dist = opts.min_dist;
    set.margin = opts.margin;
    set.seed = opts.seed;
    std::size_t attempts = 0;
    while (set.points.size() < opts.n) {
        if (++attempts > opts.max_attempts) throw infeasible();
        Vector3 p;
        for (int a = 0; a < 3; ++a) p[a] = opts.margin + rng.uniform() * inner[a];
        if ((p - room.source_position).norm() < opts.margin) continue;
        const bool ok = std::all_of(set.points.begin(), set.points.end(), [&](const Vector3& q) {
            return (p - q).norm() >= opts.min_dist;
        });
        if (ok) set.points.push_back(p);
    }
    return set;
}

void write_points_csv(const std::filesystem::path& path, const std::vector<Vector3>& points) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << "x,y,z\n" << std::setprecision(17);
    for (const auto& p : points) out << p.x() << ',' << p.y() << ',' << p.z() << '\n';
}

std::vector<Vector3> read_points_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "x,y,z") throw ValidationError(path.string() + ": expected header x,y,z");
    std::vector<Vector3> points;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        Vector3 p;
        char sep1 = 0, sep2 = 0;
        if (!(row >> p.x() >> sep1 >> p.y() >> sep2 >> p.z()) || sep1 != ',' || sep2 != ',')
            throw ValidationError(path.string() + ": malformed row '" + line + "'");
        points.push_back(p);
    }
    return points;
}

std::string mesh_statistics(const HexMesh& mesh) {
    nlohmann::ordered_json j;
    j["divisions"] = {mesh.nx, mesh.ny, mesh.nz};
    j["spacing_m"] = {mesh.spacing.x(), mesh.spacing.y(), mesh.spacing.z()};
    j["nodes"] = mesh.num_nodes();
    j["elements"] = mesh.num_elements();
    auto& walls = j["wall_faces"];
    for (int s = 0; s < kNumSurfaces; ++s)
        walls["Z" + std::to_string(s + 1)] = mesh.wall_faces[s].size();
    return j.dump(2);
}

} // namespace roomsbi
