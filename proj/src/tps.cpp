#include "tpsplit/tps.hpp"

#include <atomic>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include <Eigen/SVD>

namespace tpsplit {

namespace {

std::atomic<std::uint64_t> g_factorizations{0};

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) {
        throw std::invalid_argument(std::string(what) + " must be finite");
    }
}

}  // namespace

double kernel_u(double r) { return kernel_u_sq(r * r); }

Eigen::MatrixXd build_system_matrix(std::span<const Point2> points, double smoothing) {
    const auto n = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Point2 pi = points[i];
        L(i, i) = smoothing;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double dx = pi.x - points[j].x;
            const double dz = pi.z - points[j].z;
            const double r2 = dx * dx + dz * dz;
            if (r2 == 0.0) {
                throw std::invalid_argument("build_system_matrix: duplicate control points " + std::to_string(i) +
                                            " and " + std::to_string(j));
            }
            L(i, j) = L(j, i) = kernel_u_sq(r2);
        }
        L(i, n) = L(n, i) = 1.0;
        L(i, n + 1) = L(n + 1, i) = pi.x;
        L(i, n + 2) = L(n + 2, i) = pi.z;
    }
    return L;
}

Point2 ControlGrid::normalize(Point2 mm) const {
    const auto& e = data_->extent;
    return {2.0 * (mm.x - e.x0) / e.width() - 1.0, 2.0 * (mm.z - e.z0) / e.depth() - 1.0};
}

ControlGrid make_control_grid(int nx, int nz, const Extent& extent, double sv_cutoff, double smoothing) {
    if (nx < 2 || nz < 2) {
        throw std::invalid_argument("make_control_grid: need at least 2 points along each axis");
    }
    if (nx * nz < 4) {
        throw std::invalid_argument("make_control_grid: need at least 4 control points");
    }
    if (!(extent.width() > 0.0) || !(extent.depth() > 0.0)) {
        throw std::invalid_argument("make_control_grid: degenerate extent");
    }
    if (!(sv_cutoff > 0.0 && sv_cutoff < 1.0)) {
        throw std::invalid_argument("make_control_grid: sv_cutoff must lie in (0, 1)");
    }
    if (!(smoothing >= 0.0) || !std::isfinite(smoothing)) {
        throw std::invalid_argument("make_control_grid: smoothing must be finite and non-negative");
    }

    auto data = std::make_shared<ControlGrid::Data>();
    data->nx = nx;
    data->nz = nz;
    data->extent = extent;
    data->sv_cutoff = sv_cutoff;
    data->smoothing = smoothing;
    data->points.reserve(static_cast<std::size_t>(nx) * nz);
    data->normalized.reserve(static_cast<std::size_t>(nx) * nz);
    for (int k = 0; k < nz; ++k) {
        const double tz = static_cast<double>(k) / (nz - 1);
        for (int i = 0; i < nx; ++i) {
            const double tx = static_cast<double>(i) / (nx - 1);
            data->points.push_back({extent.x0 + tx * extent.width(), extent.z0 + tz * extent.depth()});
            data->normalized.push_back({2.0 * tx - 1.0, 2.0 * tz - 1.0});
        }
    }

    data->system = build_system_matrix(data->normalized, smoothing);

    Eigen::BDCSVD<Eigen::MatrixXd> svd(data->system, Eigen::ComputeThinU | Eigen::ComputeThinV);
    ++g_factorizations;
    const Eigen::VectorXd& sv = svd.singularValues();
    const double cutoff = sv_cutoff * sv(0);
    Eigen::VectorXd inv_sv = Eigen::VectorXd::Zero(sv.size());
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > cutoff) {
            inv_sv(i) = 1.0 / sv(i);
            ++rank;
        }
    }
    data->rank = rank;
    data->pinv = svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();

    ControlGrid grid;
    grid.data_ = std::move(data);
    return grid;
}

std::uint64_t factorization_count() { return g_factorizations.load(); }

TpsSurface solve_coefficients(const ControlGrid& grid, const Eigen::VectorXd& heights) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    if (heights.size() != n) {
        throw std::invalid_argument("solve_coefficients: expected " + std::to_string(n) + " heights, got " +
                                    std::to_string(heights.size()));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        require_finite(heights(i), "control height");
    }
    const Eigen::VectorXd coef = grid.pinv().leftCols(n) * heights;
    TpsSurface s;
    s.grid = grid;
    s.heights = heights;
    s.weights = coef.head(n);
    s.affine = coef.tail<3>();
    return s;
}

TpsSurface solve_coefficients(const ControlGrid& grid, std::span<const double> heights) {
    return solve_coefficients(grid,
                              Eigen::Map<const Eigen::VectorXd>(heights.data(), static_cast<Eigen::Index>(heights.size()))
                                  .eval());
}

double TpsSurface::operator()(Point2 q) const {
    const Point2 u = grid.normalize(q);
    const auto pts = grid.normalized_points();
    double f = affine(0) + affine(1) * u.x + affine(2) * u.z;
    for (std::size_t j = 0; j < pts.size(); ++j) {
        const double dx = u.x - pts[j].x;
        const double dz = u.z - pts[j].z;
        f += weights(static_cast<Eigen::Index>(j)) * kernel_u_sq(dx * dx + dz * dz);
    }
    return f;
}

std::vector<double> eval_surface(const TpsSurface& surface, std::span<const Point2> queries) {
    std::vector<double> out;
    out.reserve(queries.size());
    for (const Point2& q : queries) {
        require_finite(q.x, "query x");
        require_finite(q.z, "query z");
        out.push_back(surface(q));
    }
    return out;
}

double bending_energy(const TpsSurface& surface) {
    const auto n = static_cast<Eigen::Index>(surface.grid.size());
    Eigen::MatrixXd K = surface.grid.system_matrix().topLeftCorner(n, n);
    K.diagonal().setZero();
    const double e = surface.weights.dot(K * surface.weights);
    return e > 0.0 ? e : 0.0;
}

namespace {

Eigen::MatrixXd basis_rows(const ControlGrid& grid, std::span<const Point2> queries) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    const auto pts = grid.normalized_points();
    Eigen::MatrixXd B(static_cast<Eigen::Index>(queries.size()), n + 3);
    for (Eigen::Index m = 0; m < B.rows(); ++m) {
        const Point2 u = grid.normalize(queries[static_cast<std::size_t>(m)]);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double dx = u.x - pts[static_cast<std::size_t>(j)].x;
            const double dz = u.z - pts[static_cast<std::size_t>(j)].z;
            B(m, j) = kernel_u_sq(dx * dx + dz * dz);
        }
        B(m, n) = 1.0;
        B(m, n + 1) = u.x;
        B(m, n + 2) = u.z;
    }
    return B;
}

}  // namespace

Eigen::MatrixXd surface_jacobian(const ControlGrid& grid, std::span<const Point2> queries) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    return basis_rows(grid, queries) * grid.pinv().leftCols(n);
}

SurfaceSampler::SurfaceSampler(ControlGrid grid, std::span<const Point2> queries)
    : grid_(std::move(grid)), basis_(basis_rows(grid_, queries)) {}

Eigen::VectorXd SurfaceSampler::values(const Eigen::VectorXd& heights) const {
    const auto n = static_cast<Eigen::Index>(grid_.size());
    if (heights.size() != n) {
        throw std::invalid_argument("SurfaceSampler::values: height count mismatch");
    }
    const Eigen::VectorXd coef = grid_.pinv().leftCols(n) * heights;
    return basis_ * coef;
}

Eigen::VectorXd SurfaceSampler::pullback(const Eigen::VectorXd& grad_values) const {
    if (grad_values.size() != basis_.rows()) {
        throw std::invalid_argument("SurfaceSampler::pullback: gradient length mismatch");
    }
    const auto n = static_cast<Eigen::Index>(grid_.size());
    const Eigen::VectorXd grad_coef = basis_.transpose() * grad_values;
    return grid_.pinv().leftCols(n).transpose() * grad_coef;
}

nlohmann::json surface_to_json(const TpsSurface& surface) {
    const auto& e = surface.grid.extent();
    nlohmann::json doc;
    doc["nx"] = surface.grid.nx();
    doc["nz"] = surface.grid.nz();
    doc["extent_mm"] = {e.x0, e.x1, e.z0, e.z1};
    doc["heights_mm"] = std::vector<double>(surface.heights.data(), surface.heights.data() + surface.heights.size());
    if (surface.grid.smoothing() != 0.0) {
        doc["smoothing"] = surface.grid.smoothing();
    }
    return doc;
}

TpsSurface surface_from_json(const nlohmann::json& doc) {
    const auto ext = doc.at("extent_mm").get<std::vector<double>>();
    if (ext.size() != 4) {
        throw std::invalid_argument("surface json: extent_mm must hold [x0, x1, z0, z1]");
    }
    const auto grid = make_control_grid(doc.at("nx").get<int>(), doc.at("nz").get<int>(),
                                        Extent{ext[0], ext[1], ext[2], ext[3]}, doc.value("sv_cutoff", 1e-10),
                                        doc.value("smoothing", 0.0));
    const auto heights = doc.at("heights_mm").get<std::vector<double>>();
    return solve_coefficients(grid, std::span<const double>(heights));
}

void write_surface_obj(std::ostream& os, const TpsSurface& surface, int res, int height_axis) {
    if (res < 1) {
        throw std::invalid_argument("write_surface_obj: resolution must be >= 1");
    }
    if (height_axis < 0 || height_axis > 2) {
        throw std::invalid_argument("write_surface_obj: height axis must be 0, 1 or 2");
    }
    const auto& e = surface.grid.extent();
    const int a0 = height_axis == 0 ? 1 : 0;
    const int a1 = height_axis == 2 ? 1 : 2;
    os << "# tps surface " << surface.grid.nx() << "x" << surface.grid.nz() << "\n";
    os.precision(17);
    for (int k = 0; k <= res; ++k) {
        const double z = e.z0 + e.depth() * k / res;
        for (int i = 0; i <= res; ++i) {
            const double x = e.x0 + e.width() * i / res;
            double v[3];
            v[a0] = x;
            v[a1] = z;
            v[height_axis] = surface({x, z});
            os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
        }
    }
    const int row = res + 1;
    for (int k = 0; k < res; ++k) {
        for (int i = 0; i < res; ++i) {
            const int v00 = k * row + i + 1;
            const int v10 = v00 + 1;
            const int v01 = v00 + row;
            const int v11 = v01 + 1;
            os << "f " << v00 << ' ' << v10 << ' ' << v11 << '\n';
            os << "f " << v00 << ' ' << v11 << ' ' << v01 << '\n';
        }
    }
}

}  // namespace tpsplit
