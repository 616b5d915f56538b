#include "tpsplit/voxel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

#include "tpsplit/io.hpp"

namespace tpsplit {

void GridMeta::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (shape[a] < 1) {
            throw std::invalid_argument("grid shape counts must be >= 1");
        }
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
            throw std::invalid_argument("grid spacing must be positive and finite");
        }
        if (!std::isfinite(origin[a])) {
            throw std::invalid_argument("grid origin must be finite");
        }
    }
}

GridMeta cubic_meta(int n, double spacing_mm) {
    GridMeta m;
    m.shape = {n, n, n};
    m.spacing = {spacing_mm, spacing_mm, spacing_mm};
    m.validate();
    return m;
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

ScalarField to_field(const BinaryMask& mask) {
    ScalarField f(mask.meta);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        f.data[i] = mask.data[i] ? 1.0 : 0.0;
    }
    return f;
}

std::array<int, 2> plane_axes(int height_axis) {
    switch (height_axis) {
        case 0: return {1, 2};
        case 1: return {0, 2};
        case 2: return {0, 1};
        default: throw std::invalid_argument("height axis must be 0, 1 or 2");
    }
}

int parse_axis(const std::string& name) {
    if (name == "x") return 0;
    if (name == "y") return 1;
    if (name == "z") return 2;
    throw std::invalid_argument("unknown axis '" + name + "' (expected x, y or z)");
}

Extent volume_extent(const GridMeta& meta, int height_axis) {
    const auto ax = plane_axes(height_axis);
    auto lo = [&](int a) { return meta.origin[a] - 0.5 * meta.spacing[a]; };
    auto hi = [&](int a) { return meta.origin[a] + (meta.shape[a] - 0.5) * meta.spacing[a]; };
    return {lo(ax[0]), hi(ax[0]), lo(ax[1]), hi(ax[1])};
}

std::vector<Point2> column_points(const GridMeta& meta, int height_axis) {
    const auto ax = plane_axes(height_axis);
    std::vector<Point2> pts;
    pts.reserve(static_cast<std::size_t>(meta.shape[ax[0]]) * meta.shape[ax[1]]);
    for (int b = 0; b < meta.shape[ax[1]]; ++b) {
        for (int a = 0; a < meta.shape[ax[0]]; ++a) {
            pts.push_back({meta.world(ax[0], a), meta.world(ax[1], b)});
        }
    }
    return pts;
}

ScalarField axial_distance_from_columns(std::span<const double> column_heights, const GridMeta& meta,
                                        int height_axis) {
    const auto ax = plane_axes(height_axis);
    if (column_heights.size() != static_cast<std::size_t>(meta.shape[ax[0]]) * meta.shape[ax[1]]) {
        throw std::invalid_argument("axial_distance_from_columns: column count mismatch");
    }
    ScalarField d(meta);
    std::size_t v = 0;
    for (int k = 0; k < meta.shape[2]; ++k) {
        for (int j = 0; j < meta.shape[1]; ++j) {
            for (int i = 0; i < meta.shape[0]; ++i, ++v) {
                const int ijk[3] = {i, j, k};
                const double h = meta.world(height_axis, ijk[height_axis]);
                d.data[v] = h - column_heights[column_of(meta, height_axis, i, j, k)];
            }
        }
    }
    return d;
}

ScalarField signed_axial_distance_field(const TpsSurface& surface, const GridMeta& meta, int height_axis) {
    const auto cols = column_points(meta, height_axis);
    const auto heights = eval_surface(surface, cols);
    return axial_distance_from_columns(heights, meta, height_axis);
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

ScalarField soft_mask(const ScalarField& distance, double tau_mm, bool flip) {
    if (!(tau_mm > 0.0) || !std::isfinite(tau_mm)) {
        throw std::invalid_argument("soft_mask: tau must be positive");
    }
    const double s = (flip ? -1.0 : 1.0) / tau_mm;
    ScalarField m(distance.meta);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        m.data[i] = sigmoid(s * distance.data[i]);
    }
    return m;
}

ScalarField apply_mask(const BinaryMask& mask, const ScalarField& soft) {
    if (!(mask.meta == soft.meta)) {
        throw std::invalid_argument("apply_mask: grid geometry mismatch");
    }
    ScalarField out(mask.meta);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = mask.data[i] ? soft.data[i] : 0.0;
    }
    return out;
}

BinaryMask threshold(const ScalarField& soft, double level) {
    BinaryMask out(soft.meta);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = soft.data[i] > level ? 1 : 0;
    }
    return out;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
    if (!(a.meta == b.meta)) {
        throw std::invalid_argument("dice: grid geometry mismatch");
    }
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool va = a.data[i] != 0;
        const bool vb = b.data[i] != 0;
        na += va;
        nb += vb;
        both += va && vb;
    }
    if (na + nb == 0) {
        throw std::invalid_argument("dice: both masks are empty");
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

namespace {

// Squared distance lower envelope along one line (Felzenszwalb & Huttenlocher),
// sample positions at idx * step.
void edt_1d(const double* f, double* out, int n, double step, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (std::isinf(f[q])) continue;
        const double pq = q * step;
        while (k >= 0) {
            const int r = v[static_cast<std::size_t>(k)];
            const double pr = r * step;
            const double s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        if (k == 0) {
            z[0] = -inf;
        } else {
            const int r = v[static_cast<std::size_t>(k) - 1];
            const double pr = r * step;
            z[static_cast<std::size_t>(k)] = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
        }
        z[static_cast<std::size_t>(k) + 1] = inf;
    }
    if (k < 0) {
        std::fill(out, out + n, inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double pq = q * step;
        while (z[static_cast<std::size_t>(j) + 1] < pq) ++j;
        const int r = v[static_cast<std::size_t>(j)];
        const double d = pq - r * step;
        out[q] = d * d + f[r];
    }
}

}  // namespace

std::vector<double> squared_distance_transform(const BinaryMask& mask) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const auto& m = mask.meta;
    std::vector<double> dist(m.voxel_count());
    for (std::size_t i = 0; i < dist.size(); ++i) {
        dist[i] = mask.data[i] ? 0.0 : inf;
    }
    const std::size_t stride[3] = {1, static_cast<std::size_t>(m.shape[0]),
                                   static_cast<std::size_t>(m.shape[0]) * m.shape[1]};
    std::vector<double> line_in, line_out;
    std::vector<int> v;
    std::vector<double> z;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = m.shape[axis];
        line_in.resize(static_cast<std::size_t>(n));
        line_out.resize(static_cast<std::size_t>(n));
        const int o1 = axis == 0 ? 1 : 0;
        const int o2 = axis == 2 ? 1 : 2;
        for (int b = 0; b < m.shape[o2]; ++b) {
            for (int a = 0; a < m.shape[o1]; ++a) {
                const std::size_t base = a * stride[o1] + b * stride[o2];
                for (int t = 0; t < n; ++t) line_in[static_cast<std::size_t>(t)] = dist[base + t * stride[axis]];
                edt_1d(line_in.data(), line_out.data(), n, m.spacing[axis], v, z);
                for (int t = 0; t < n; ++t) dist[base + t * stride[axis]] = line_out[static_cast<std::size_t>(t)];
            }
        }
    }
    return dist;
}

double hausdorff_mm(const BinaryMask& a, const BinaryMask& b) {
    if (!(a.meta == b.meta)) {
        throw std::invalid_argument("hausdorff_mm: grid geometry mismatch");
    }
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("hausdorff_mm: both masks must be non-empty");
    }
    const auto da = squared_distance_transform(a);
    const auto db = squared_distance_transform(b);
    double worst = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        if (a.data[i]) worst = std::max(worst, db[i]);
        if (b.data[i]) worst = std::max(worst, da[i]);
    }
    return std::sqrt(worst);
}

namespace {

GridMeta coarse_meta(const GridMeta& fine, int factor) {
    if (factor < 1) {
        throw std::invalid_argument("downsample: factor must be >= 1");
    }
    GridMeta c = fine;
    for (int a = 0; a < 3; ++a) {
        if (fine.shape[a] % factor != 0) {
            throw std::invalid_argument("downsample: factor " + std::to_string(factor) + " does not divide shape " +
                                        std::to_string(fine.shape[a]));
        }
        c.shape[a] = fine.shape[a] / factor;
        c.spacing[a] = fine.spacing[a] * factor;
        c.origin[a] = fine.origin[a] + 0.5 * (factor - 1) * fine.spacing[a];
    }
    return c;
}

}  // namespace

ScalarField downsample(const ScalarField& field, int factor) {
    const GridMeta cm = coarse_meta(field.meta, factor);
    if (factor == 1) {
        return field;
    }
    const auto& fm = field.meta;
    ScalarField out(cm);
    const double scale = 1.0 / (static_cast<double>(factor) * factor * factor);
    std::size_t c = 0;
    for (int k = 0; k < cm.shape[2]; ++k) {
        for (int j = 0; j < cm.shape[1]; ++j) {
            for (int i = 0; i < cm.shape[0]; ++i, ++c) {
                double sum = 0.0;
                for (int dk = 0; dk < factor; ++dk) {
                    for (int dj = 0; dj < factor; ++dj) {
                        const double* row = &field.data[fm.index(i * factor, j * factor + dj, k * factor + dk)];
                        for (int di = 0; di < factor; ++di) sum += row[di];
                    }
                }
                out.data[c] = sum * scale;
            }
        }
    }
    return out;
}

ScalarField downsample_adjoint(const ScalarField& coarse_grad, const GridMeta& fine_meta, int factor) {
    const GridMeta cm = coarse_meta(fine_meta, factor);
    if (!(cm.shape == coarse_grad.meta.shape)) {
        throw std::invalid_argument("downsample_adjoint: coarse shape mismatch");
    }
    ScalarField out(fine_meta);
    const double scale = 1.0 / (static_cast<double>(factor) * factor * factor);
    std::size_t c = 0;
    for (int k = 0; k < cm.shape[2]; ++k) {
        for (int j = 0; j < cm.shape[1]; ++j) {
            for (int i = 0; i < cm.shape[0]; ++i, ++c) {
                const double g = coarse_grad.data[c] * scale;
                for (int dk = 0; dk < factor; ++dk) {
                    for (int dj = 0; dj < factor; ++dj) {
                        double* row = &out.data[fine_meta.index(i * factor, j * factor + dj, k * factor + dk)];
                        for (int di = 0; di < factor; ++di) row[di] = g;
                    }
                }
            }
        }
    }
    return out;
}

nlohmann::json meta_to_json(const GridMeta& meta) {
    return {{"shape", meta.shape}, {"spacing_mm", meta.spacing}, {"origin_mm", meta.origin}};
}

GridMeta meta_from_json(const nlohmann::json& doc) {
    GridMeta m;
    m.shape = doc.at("shape").get<std::array<int, 3>>();
    m.spacing = doc.at("spacing_mm").get<std::array<double, 3>>();
    m.origin = doc.at("origin_mm").get<std::array<double, 3>>();
    m.validate();
    return m;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
    auto p = stem;
    p += suffix;
    return p;
}

nlohmann::json sidecar(const GridMeta& meta, const char* dtype) {
    auto doc = meta_to_json(meta);
    doc["dtype"] = dtype;
    doc["byte_order"] = "little";
    return doc;
}

nlohmann::json read_sidecar(const std::filesystem::path& stem, const char* dtype) {
    auto doc = nlohmann::json::parse(read_text_file(with_suffix(stem, ".json")));
    if (doc.value("dtype", "") != dtype) {
        throw std::runtime_error(stem.string() + ": expected dtype " + dtype);
    }
    if (doc.value("byte_order", "") != "little") {
        throw std::runtime_error(stem.string() + ": only little-endian payloads are supported");
    }
    return doc;
}

}  // namespace

void write_mask(const std::filesystem::path& stem, const BinaryMask& mask) {
    std::string payload(mask.data.size(), '\0');
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        payload[i] = mask.data[i] ? 1 : 0;
    }
    write_file_atomic(with_suffix(stem, ".raw"), payload);
    write_file_atomic(with_suffix(stem, ".json"), sidecar(mask.meta, "u8").dump(2) + "\n");
}

BinaryMask read_mask(const std::filesystem::path& stem) {
    const auto doc = read_sidecar(stem, "u8");
    BinaryMask mask(meta_from_json(doc));
    const std::string payload = read_text_file(with_suffix(stem, ".raw"));
    if (payload.size() != mask.data.size()) {
        throw std::runtime_error(stem.string() + ": payload size does not match shape");
    }
    for (std::size_t i = 0; i < payload.size(); ++i) {
        mask.data[i] = payload[i] != 0 ? 1 : 0;
    }
    return mask;
}

void write_field(const std::filesystem::path& stem, const ScalarField& field) {
    std::vector<float> values(field.data.begin(), field.data.end());
    write_file_atomic(with_suffix(stem, ".raw"), encode_f32_le(values));
    write_file_atomic(with_suffix(stem, ".json"), sidecar(field.meta, "f32").dump(2) + "\n");
}

ScalarField read_field(const std::filesystem::path& stem) {
    const auto doc = read_sidecar(stem, "f32");
    ScalarField field(meta_from_json(doc));
    const auto values = decode_f32_le(read_text_file(with_suffix(stem, ".raw")));
    if (values.size() != field.data.size()) {
        throw std::runtime_error(stem.string() + ": payload size does not match shape");
    }
    std::copy(values.begin(), values.end(), field.data.begin());
    return field;
}

void write_pgm_slice(std::ostream& os, const ScalarField& field, int axis, int index) {
    const auto& m = field.meta;
    const auto ax = plane_axes(axis);
    if (index < 0 || index >= m.shape[axis]) {
        throw std::invalid_argument("write_pgm_slice: slice index out of range");
    }
    const int w = m.shape[ax[0]];
    const int h = m.shape[ax[1]];
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::string row(static_cast<std::size_t>(w), '\0');
    for (int b = 0; b < h; ++b) {
        for (int a = 0; a < w; ++a) {
            int ijk[3];
            ijk[axis] = index;
            ijk[ax[0]] = a;
            ijk[ax[1]] = b;
            const double v = std::clamp(field.data[m.index(ijk[0], ijk[1], ijk[2])], 0.0, 1.0);
            row[static_cast<std::size_t>(a)] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
        }
        os.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace tpsplit
