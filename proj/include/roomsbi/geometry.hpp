#ifndef ROOMSBI_GEOMETRY_HPP
#define ROOMSBI_GEOMETRY_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "roomsbi/errors.hpp"
#include "roomsbi/impedance.hpp"

namespace roomsbi {

using Vector3 = Eigen::Vector3d;

struct RoomSpec {
    double Lx{0.963};
    double Ly{0.975};
    double Lz{2.075};
    double c{343.0};
    double rho0{1.2};
    Vector3 source_position{0.15, 0.825, 1.925};
    /// Monopole volume flow amplitude, m^3/s.
    double source_volume_flow{1.0e-4};

    Vector3 extent() const { return {Lx, Ly, Lz}; }
    double volume() const { return Lx * Ly * Lz; }
    bool contains(const Vector3& x, double tol = 0.0) const;
    void validate() const;
};

/// Structured grid of axis-aligned trilinear hexahedra.
///
/// Node (i, j, k) has index i + (nx+1) * (j + (ny+1) * k). Element nodes follow
/// the lexicographic local order (a, b, c) in {0,1}^3, local index a + 2b + 4c,
/// matching local coordinates (2a-1, 2b-1, 2c-1).
struct HexMesh {
    int nx{0}, ny{0}, nz{0};
    Vector3 extent{Vector3::Zero()};
    Vector3 spacing{Vector3::Zero()};
    Eigen::Matrix3Xd nodes;
    Eigen::Matrix<int, 8, Eigen::Dynamic> elements;
    /// Boundary faces per wall tag; each face lists its 4 nodes counter-clockwise
    /// in the wall's own (u, v) parametrisation.
    std::array<std::vector<std::array<int, 4>>, kNumSurfaces> wall_faces;

    Eigen::Index num_nodes() const { return nodes.cols(); }
    Eigen::Index num_elements() const { return elements.cols(); }
    int node_index(int i, int j, int k) const { return i + (nx + 1) * (j + (ny + 1) * k); }
    /// Largest edge length over the three axes.
    double h() const { return spacing.maxCoeff(); }
    /// Area of one face on wall `tag`.
    double face_area(int tag) const;
    bool operator==(const HexMesh&) const = default;
};

struct MeshOptions {
    double elements_per_wavelength{10.0};
    double f_max{500.0};
    /// Every axis count is multiplied by this factor; refinement 2 nests the
    /// coarse grid inside the fine one.
    int refinement{1};
    std::size_t node_budget{400000};
};

HexMesh build_mesh(const RoomSpec& room, const MeshOptions& opts);

/// Elements per axis before refinement.
std::array<int, 3> base_divisions(const RoomSpec& room, double elements_per_wavelength,
                                  double f_max);

struct PointLocation {
    Eigen::Index element{0};
    Vector3 local{Vector3::Zero()};
};

PointLocation locate_point(const HexMesh& mesh, const Vector3& x);

/// Trilinear shape function values at local coordinates, in element-local order.
Eigen::Matrix<double, 8, 1> shape_functions(const Vector3& local);
/// Global position reconstructed from shape functions.
Vector3 map_to_global(const HexMesh& mesh, const PointLocation& loc);

struct ObservationSet {
    std::vector<Vector3> points;
    double min_dist{0.3};
    double margin{0.1};
    std::uint64_t seed{0};

    std::size_t size() const { return points.size(); }
};

struct ObservationOptions {
    std::size_t n{26};
    double min_dist{0.3};
    double margin{0.1};
    std::uint64_t seed{0};
    std::size_t max_attempts{2000000};
};

ObservationSet select_observation_points(const RoomSpec& room, const ObservationOptions& opts);

void write_points_csv(const std::filesystem::path& path, const std::vector<Vector3>& points);
std::vector<Vector3> read_points_csv(const std::filesystem::path& path);

/// Mesh statistics as a JSON document (debug aid).
std::string mesh_statistics(const HexMesh& mesh);

} // namespace roomsbi

#endif // ROOMSBI_GEOMETRY_HPP
