// Thin-plate-spline height surfaces over a fixed 2D control lattice.
//
// The surface is a scalar height field f(x, z) parameterized by one height per
// control point. Because the control positions never move, the TPS system
// matrix and its pseudo-inverse are built once per lattice; every subsequent
// coefficient solve is a single matrix-vector product and therefore linear in
// the heights.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace tpsplit {

/// In-plane position in mm. `x` is the first in-plane axis, `z` the second.
struct Point2 {
    double x = 0.0;
    double z = 0.0;
};

/// Axis-aligned in-plane rectangle in mm.
struct Extent {
    double x0 = 0.0;
    double x1 = 0.0;
    double z0 = 0.0;
    double z1 = 0.0;

    double width() const { return x1 - x0; }
    double depth() const { return z1 - z0; }
};

/// U(r) = r^2 ln(r^2), with U(0) = 0.
double kernel_u(double r);

/// Same kernel from a squared distance; avoids the square root.
inline double kernel_u_sq(double r2);

/// L = [[K + smoothing*I, P], [P^T, 0]] for the given (already normalized)
/// points. Throws std::invalid_argument on duplicate points.
Eigen::MatrixXd build_system_matrix(std::span<const Point2> points, double smoothing = 0.0);

/// Immutable control lattice with its precomputed system pseudo-inverse.
///
/// Copies are cheap handles onto shared, read-only state, so one grid may be
/// used from any number of threads.
class ControlGrid {
public:
    ControlGrid() = default;

    int nx() const { return data_->nx; }
    int nz() const { return data_->nz; }
    std::size_t size() const { return data_->points.size(); }
    const Extent& extent() const { return data_->extent; }
    double sv_cutoff() const { return data_->sv_cutoff; }
    double smoothing() const { return data_->smoothing; }
    bool valid() const { return static_cast<bool>(data_); }

    /// Lattice positions in mm, row-major with x fastest.
    std::span<const Point2> points() const { return data_->points; }
    /// Lattice positions mapped into [-1, 1]^2.
    std::span<const Point2> normalized_points() const { return data_->normalized; }

    /// (N+3)x(N+3) system matrix in normalized coordinates.
    const Eigen::MatrixXd& system_matrix() const { return data_->system; }
    /// Pseudo-inverse of system_matrix().
    const Eigen::MatrixXd& pinv() const { return data_->pinv; }
    /// Number of singular values kept by the pseudo-inverse.
    int rank() const { return data_->rank; }

    Point2 normalize(Point2 mm) const;

    bool same_as(const ControlGrid& other) const { return data_ == other.data_; }

private:
    struct Data {
        int nx = 0;
        int nz = 0;
        Extent extent;
        double sv_cutoff = 0.0;
        double smoothing = 0.0;
        std::vector<Point2> points;
        std::vector<Point2> normalized;
        Eigen::MatrixXd system;
        Eigen::MatrixXd pinv;
        int rank = 0;
    };
    std::shared_ptr<const Data> data_;

    friend ControlGrid make_control_grid(int, int, const Extent&, double, double);
};

/// Builds the lattice and factorizes its system matrix. This is the only place
/// a factorization happens.
ControlGrid make_control_grid(int nx, int nz, const Extent& extent, double sv_cutoff = 1e-10,
                              double smoothing = 0.0);

/// Total number of system factorizations performed by this process.
std::uint64_t factorization_count();

struct TpsSurface {
    ControlGrid grid;
    Eigen::VectorXd heights;  // mm
    Eigen::VectorXd weights;  // kernel coefficients
    Eigen::Vector3d affine;   // constant, slope-x, slope-z over normalized coordinates

    double operator()(Point2 q) const;
};

TpsSurface solve_coefficients(const ControlGrid& grid, std::span<const double> heights);
TpsSurface solve_coefficients(const ControlGrid& grid, const Eigen::VectorXd& heights);

std::vector<double> eval_surface(const TpsSurface& surface, std::span<const Point2> queries);

/// w^T K w over normalized coordinates. Integrating the squared second
/// derivatives of f over the plane gives 16*pi times this value.
double bending_energy(const TpsSurface& surface);

/// Exact M x N Jacobian of f(queries) with respect to the control heights.
Eigen::MatrixXd surface_jacobian(const ControlGrid& grid, std::span<const Point2> queries);

/// Kernel rows for a fixed set of query points, for repeated evaluation and
/// adjoint application without materializing the M x N Jacobian.
class SurfaceSampler {
public:
    SurfaceSampler(ControlGrid grid, std::span<const Point2> queries);

    const ControlGrid& grid() const { return grid_; }
    std::size_t query_count() const { return static_cast<std::size_t>(basis_.rows()); }

    /// f at every query for the given heights.
    Eigen::VectorXd values(const Eigen::VectorXd& heights) const;
    /// J^T g: gradient with respect to heights of sum_m g_m f(q_m).
    Eigen::VectorXd pullback(const Eigen::VectorXd& grad_values) const;

private:
    ControlGrid grid_;
    Eigen::MatrixXd basis_;  // M x (N+3): [U(|q-p_j|)..., 1, x, z]
};

// JSON document {nx, nz, extent_mm: [x0, x1, z0, z1], heights_mm: [...]}.
nlohmann::json surface_to_json(const TpsSurface& surface);
TpsSurface surface_from_json(const nlohmann::json& doc);

/// ASCII OBJ of f sampled on a regular (res+1)^2 lattice over the grid extent,
/// two triangles per quad. `height_axis` selects which output coordinate holds f.
void write_surface_obj(std::ostream& os, const TpsSurface& surface, int res = 64, int height_axis = 1);

inline double kernel_u_sq(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

}  // namespace tpsplit
