// Independent reference implementations used by the tests. Everything here is
// written the slow, obvious way and shares no code with the library beyond the
// plain data types.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "tpsplit/nn.hpp"
#include "tpsplit/tps.hpp"
#include "tpsplit/voxel.hpp"

namespace oracle {

inline std::vector<std::array<double, 3>> centers(const tpsplit::BinaryMask& m) {
    std::vector<std::array<double, 3>> out;
    for (int k = 0; k < m.meta.shape[2]; ++k)
        for (int j = 0; j < m.meta.shape[1]; ++j)
            for (int i = 0; i < m.meta.shape[0]; ++i)
                if (m.data[m.meta.index(i, j, k)]) out.push_back({m.meta.world(0, i), m.meta.world(1, j), m.meta.world(2, k)});
    return out;
}

inline double dice(const tpsplit::BinaryMask& a, const tpsplit::BinaryMask& b) {
    long inter = 0, na = 0, nb = 0;
    for (std::size_t v = 0; v < a.data.size(); ++v) {
        na += a.data[v];
        nb += b.data[v];
        inter += a.data[v] && b.data[v];
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double directed(const std::vector<std::array<double, 3>>& a, const std::vector<std::array<double, 3>>& b) {
    double worst = 0.0;
    for (const auto& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : b) {
            const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
            best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
        }
        worst = std::max(worst, best);
    }
    return worst;
}

inline double hausdorff(const tpsplit::BinaryMask& a, const tpsplit::BinaryMask& b) {
    const auto pa = centers(a), pb = centers(b);
    return std::max(directed(pa, pb), directed(pb, pa));
}

/// Random mask with roughly `fill` occupancy.
inline tpsplit::BinaryMask random_mask(const tpsplit::GridMeta& meta, double fill, std::mt19937_64& rng) {
    tpsplit::BinaryMask m(meta);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : m.data) v = u(rng) < fill ? 1 : 0;
    if (m.count() == 0) m.data[rng() % m.data.size()] = 1;
    return m;
}

inline double tps_kernel(double x, double z) {
    const double s = x * x + z * z;
    return s > 0.0 ? s * std::log(s) : 0.0;
}

/// Coefficients [w; a] from a direct dense solve of the interpolation system
/// built here from scratch over normalized points.
inline Eigen::VectorXd direct_tps_solve(const std::vector<tpsplit::Point2>& pts, const Eigen::VectorXd& h) {
    const auto n = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            L(i, j) = tps_kernel(pts[i].x - pts[j].x, pts[i].z - pts[j].z);
        }
        L(i, n) = L(n, i) = 1.0;
        L(i, n + 1) = L(n + 1, i) = pts[i].x;
        L(i, n + 2) = L(n + 2, i) = pts[i].z;
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 3);
    rhs.head(n) = h;
    return L.fullPivLu().solve(rhs);
}

/// Integral of f_xx^2 + 2 f_xz^2 + f_zz^2 over [-outer, outer]^2 using analytic
/// second derivatives of the kernel part and a two-level midpoint rule.
inline double bending_quadrature(const std::vector<tpsplit::Point2>& pts, const Eigen::VectorXd& w, double inner,
                                 double h_inner, double outer, double h_outer) {
    auto integrand = [&](double x, double z) {
        double fxx = 0.0, fxz = 0.0, fzz = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double dx = x - pts[i].x, dz = z - pts[i].z;
            const double s = dx * dx + dz * dz;
            const double l = std::log(s) + 1.0;
            const double wi = w(static_cast<Eigen::Index>(i));
            fxx += wi * (2.0 * l + 4.0 * dx * dx / s);
            fzz += wi * (2.0 * l + 4.0 * dz * dz / s);
            fxz += wi * (4.0 * dx * dz / s);
        }
        return fxx * fxx + 2.0 * fxz * fxz + fzz * fzz;
    };
    double total = 0.0;
    const int ni = static_cast<int>(std::lround(2.0 * inner / h_inner));
    for (int a = 0; a < ni; ++a)
        for (int b = 0; b < ni; ++b) total += integrand(-inner + (a + 0.5) * h_inner, -inner + (b + 0.5) * h_inner);
    total *= h_inner * h_inner;
    double outer_sum = 0.0;
    const int no = static_cast<int>(std::lround(2.0 * outer / h_outer));
    for (int a = 0; a < no; ++a)
        for (int b = 0; b < no; ++b) {
            const double x = -outer + (a + 0.5) * h_outer, z = -outer + (b + 0.5) * h_outer;
            if (std::abs(x) < inner && std::abs(z) < inner) continue;
            outer_sum += integrand(x, z);
        }
    return total + outer_sum * h_outer * h_outer;
}

/// Relative error between two vectors: |a - b| / max(|a|, |b|, floor).
inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-12) {
    return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

/// Plain loops: valid, stride-s 3D convolution on a (c, d, h, w) tensor.
inline tpsplit::nn::Tensor conv3d(const tpsplit::nn::Tensor& x, const double* W, const double* b, int out_ch, int k,
                                  int s) {
    const int c = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int od = (d - k) / s + 1, oh = (h - k) / s + 1, ow = (w - k) / s + 1;
    tpsplit::nn::Tensor y({out_ch, od, oh, ow});
    auto at = [&](int ci, int z, int yy, int xx) { return x.data[((static_cast<std::size_t>(ci) * d + z) * h + yy) * w + xx]; };
    for (int o = 0; o < out_ch; ++o)
        for (int z = 0; z < od; ++z)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    double acc = b[o];
                    for (int ci = 0; ci < c; ++ci)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const std::size_t widx = (((static_cast<std::size_t>(o) * c + ci) * k + kz) * k + ky) * k + kx;
                                    acc += W[widx] * at(ci, z * s + kz, yy * s + ky, xx * s + kx);
                                }
                    y.data[((static_cast<std::size_t>(o) * od + z) * oh + yy) * ow + xx] = acc;
                }
    return y;
}

inline std::vector<double> dense(const std::vector<double>& x, const double* W, const double* b, int in, int out) {
    std::vector<double> y(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
        double acc = b[o];
        for (int i = 0; i < in; ++i) acc += W[static_cast<std::size_t>(o) * in + i] * x[static_cast<std::size_t>(i)];
        y[static_cast<std::size_t>(o)] = acc;
    }
    return y;
}

}  // namespace oracle
