// Voxel geometry, binary and soft masks, TPS distance fields, and overlap
// metrics.
//
// All volumes are stored x-fastest: index = i + nx * (j + ny * k). World
// coordinates refer to voxel centers: world[a] = origin[a] + index[a] * spacing[a].

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "tpsplit/tps.hpp"

namespace tpsplit {

struct GridMeta {
    std::array<int, 3> shape{1, 1, 1};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
    std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, center of voxel (0,0,0)

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) + static_cast<std::size_t>(shape[0]) *
                                                 (static_cast<std::size_t>(j) + static_cast<std::size_t>(shape[1]) * k);
    }
    double world(int axis, int idx) const { return origin[axis] + idx * spacing[axis]; }

    /// Throws std::invalid_argument unless counts >= 1 and spacings > 0.
    void validate() const;

    bool operator==(const GridMeta&) const = default;
};

/// Cubic grid of `n` voxels per side at isotropic `spacing_mm`, origin at 0.
GridMeta cubic_meta(int n, double spacing_mm = 1.0);

struct BinaryMask {
    GridMeta meta;
    std::vector<std::uint8_t> data;  // 0 or 1

    BinaryMask() = default;
    explicit BinaryMask(const GridMeta& m) : meta(m), data(m.voxel_count(), 0) {}

    std::size_t count() const;
    bool empty() const { return count() == 0; }
};

struct ScalarField {
    GridMeta meta;
    std::vector<double> data;

    ScalarField() = default;
    explicit ScalarField(const GridMeta& m, double fill = 0.0) : meta(m), data(m.voxel_count(), fill) {}
};

ScalarField to_field(const BinaryMask& mask);

/// The two axes spanning the surface plane for a given height axis, in
/// increasing order. For height axis 1 (y) this is {0, 2}, i.e. (x, z).
std::array<int, 2> plane_axes(int height_axis);

/// Parses "x", "y" or "z".
int parse_axis(const std::string& name);

/// In-plane voxel-edge bounding rectangle of the volume.
Extent volume_extent(const GridMeta& meta, int height_axis);

/// In-plane world coordinates of every voxel column, first plane axis fastest.
std::vector<Point2> column_points(const GridMeta& meta, int height_axis);

/// Column index of voxel (i, j, k) into column_points().
inline std::size_t column_of(const GridMeta& meta, int height_axis, int i, int j, int k) {
    const int ijk[3] = {i, j, k};
    const auto ax = plane_axes(height_axis);
    return static_cast<std::size_t>(ijk[ax[0]]) + static_cast<std::size_t>(meta.shape[ax[0]]) * ijk[ax[1]];
}

/// d(v) = world coordinate of v along the height axis minus f at v's in-plane
/// position.
ScalarField signed_axial_distance_field(const TpsSurface& surface, const GridMeta& meta, int height_axis = 1);

/// Same as above from surface values already sampled at column_points().
ScalarField axial_distance_from_columns(std::span<const double> column_heights, const GridMeta& meta,
                                        int height_axis = 1);

double sigmoid(double x);

/// m(v) = sigmoid(s * d(v) / tau) with s = -1 when flip is set.
ScalarField soft_mask(const ScalarField& distance, double tau_mm, bool flip = false);

/// Voxel-wise product of a binary mask with a soft mask.
ScalarField apply_mask(const BinaryMask& mask, const ScalarField& soft);

/// Voxels strictly above `level`.
BinaryMask threshold(const ScalarField& soft, double level = 0.5);

double dice(const BinaryMask& a, const BinaryMask& b);

/// Exact symmetric Hausdorff distance between voxel-center sets in mm.
double hausdorff_mm(const BinaryMask& a, const BinaryMask& b);

/// Exact squared Euclidean distance (mm^2) from every voxel center to the
/// nearest set voxel of `mask`. Infinity everywhere when the mask is empty.
std::vector<double> squared_distance_transform(const BinaryMask& mask);

/// Mean pooling over factor^3 blocks.
ScalarField downsample(const ScalarField& field, int factor);

/// Adjoint of downsample(): spreads each coarse gradient uniformly over its
/// block, scaled by 1/factor^3.
ScalarField downsample_adjoint(const ScalarField& coarse_grad, const GridMeta& fine_meta, int factor);

// Sidecar JSON {shape, spacing_mm, origin_mm, dtype, byte_order} next to a raw
// little-endian payload. `stem` gets ".json" and ".raw" appended.
void write_mask(const std::filesystem::path& stem, const BinaryMask& mask);
BinaryMask read_mask(const std::filesystem::path& stem);
void write_field(const std::filesystem::path& stem, const ScalarField& field);
ScalarField read_field(const std::filesystem::path& stem);

nlohmann::json meta_to_json(const GridMeta& meta);
GridMeta meta_from_json(const nlohmann::json& doc);

/// Binary PGM (P5) of one slice orthogonal to `axis`; values in [0, 1] map
/// linearly onto 0..255, clamped.
void write_pgm_slice(std::ostream& os, const ScalarField& field, int axis, int index);

}  // namespace tpsplit
