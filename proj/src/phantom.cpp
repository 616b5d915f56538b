#include "tpsplit/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tpsplit/io.hpp"

namespace tpsplit {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double BoundaryModel::operator()(double x, double z) const {
    const double dx = x - center_mm[0];
    const double dz = z - center_mm[2];
    const double u = dx / radius_mm;
    double y = center_mm[1] + offset_mm + tilt[0] * dx + tilt[1] * dz + curve_amplitude_mm * u * u;
    if (noise_amplitude_mm != 0.0 && !noise_modes.empty()) {
        double n = 0.0;
        for (const auto& m : noise_modes) {
            n += std::sin(2.0 * std::numbers::pi * (m[0] * x + m[1] * z) + m[2]);
        }
        y += noise_amplitude_mm * std::sqrt(2.0 / static_cast<double>(noise_modes.size())) * n;
    }
    return y;
}

namespace {

constexpr int kNoiseModes = 4;

void check_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument(std::string("phantom: ") + name + " must be positive");
    }
}

void validate(const PhantomParams& p) {
    p.volume.validate();
    check_positive(p.body_radius_mm[0], "body in-plane radius");
    check_positive(p.body_radius_mm[1], "body axial radius");
    check_positive(p.body_depth_ratio, "body depth ratio");
    check_positive(p.arch_thickness_mm, "arch thickness");
    check_positive(p.canal_radius_mm, "canal radius");
    check_positive(p.pedicle_length_mm, "pedicle length");
    check_positive(p.arch_half_height_mm, "arch half height");
    check_positive(p.process_width_mm, "process width");
    for (double l : p.process_lengths_mm) check_positive(l, "process length");
    if (!(p.boundary_fraction > -1.0 && p.boundary_fraction < 1.0)) {
        throw std::invalid_argument("phantom: boundary fraction must lie in (-1, 1)");
    }
    if (!(p.noise_amplitude_mm >= 0.0)) {
        throw std::invalid_argument("phantom: noise amplitude must be non-negative");
    }
}

double volume_center(const GridMeta& m, int a) { return m.origin[a] + 0.5 * (m.shape[a] - 1) * m.spacing[a]; }

struct Layout {
    double cx, cy, cz;
    double rx, ry, h;
    double canal_y;
    double y_min, y_max, x_half, z_half;
};

Layout layout_of(const PhantomParams& p) {
    Layout l{};
    l.rx = p.body_radius_mm[0];
    l.ry = p.body_radius_mm[0] * p.body_depth_ratio;
    l.h = p.body_radius_mm[1];
    const double cut = p.boundary_fraction * l.ry;
    const double behind = cut + p.pedicle_length_mm + p.canal_radius_mm + p.arch_thickness_mm + p.process_lengths_mm[0];
    l.cx = volume_center(p.volume, 0) + p.offset_mm[0];
    l.cy = volume_center(p.volume, 1) - 0.5 * (behind - l.ry) + p.offset_mm[1];
    l.cz = volume_center(p.volume, 2) + p.offset_mm[2];
    l.canal_y = l.cy + cut + p.pedicle_length_mm;
    l.y_min = l.cy - l.ry;
    l.y_max = l.cy + behind;
    const double transverse = p.canal_radius_mm + p.arch_thickness_mm + std::max(p.process_lengths_mm[1], p.process_lengths_mm[2]);
    l.x_half = std::max(l.rx, transverse);
    l.z_half = std::max(l.h, p.arch_half_height_mm);
    return l;
}

std::string label_of(const PhantomParams& p) {
    const double r = p.body_radius_mm[0];
    const char* size = r < 11.0 ? "small" : (r > 13.0 ? "large" : "medium");
    const char* curve = std::abs(p.boundary_curve_amplitude_mm) < 0.5 ? "flat" : "curved";
    return std::string(size) + "-" + curve;
}

}  // namespace

Phantom generate_phantom(const PhantomParams& params) {
    validate(params);
    const auto& m = params.volume;
    const Layout l = layout_of(params);

    const double lo[3] = {m.world(0, 0), m.world(1, 0), m.world(2, 0)};
    const double hi[3] = {m.world(0, m.shape[0] - 1), m.world(1, m.shape[1] - 1), m.world(2, m.shape[2] - 1)};
    if (l.cx - l.x_half < lo[0] || l.cx + l.x_half > hi[0] || l.y_min < lo[1] || l.y_max > hi[1] ||
        l.cz - l.z_half < lo[2] || l.cz + l.z_half > hi[2]) {
        throw std::invalid_argument("phantom: shape exceeds the volume bounds");
    }

    Phantom out;
    out.params = params;
    out.label = label_of(params);

    BoundaryModel& b = out.true_boundary;
    b.center_mm = {l.cx, l.cy, l.cz};
    b.offset_mm = params.boundary_fraction * l.ry;
    b.radius_mm = l.rx;
    b.curve_amplitude_mm = params.boundary_curve_amplitude_mm;
    b.tilt = params.boundary_tilt;
    b.noise_amplitude_mm = params.noise_amplitude_mm;
    if (params.noise_amplitude_mm > 0.0) {
        Rng rng(mix_seed(params.seed, 0x6e6f697365ULL));
        for (int i = 0; i < kNoiseModes; ++i) {
            const double freq = rng.uniform(1.0 / 16.0, 1.0 / 8.0);
            const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            b.noise_modes.push_back({freq * std::cos(angle), freq * std::sin(angle), phase});
        }
    }

    out.vertebra = BinaryMask(m);
    out.body = BinaryMask(m);
    out.posterior = BinaryMask(m);

    const double rc = params.canal_radius_mm;
    const double t = params.arch_thickness_mm;
    const double w = params.process_width_mm;
    const double ha = params.arch_half_height_mm;
    const double hp = 0.75 * ha;
    const double ped_center = rc + 0.5 * t;
    const double spin_start = l.canal_y + rc + 0.5 * t;
    const double spin_end = l.canal_y + rc + t + params.process_lengths_mm[0];

    for (int k = 0; k < m.shape[2]; ++k) {
        const double z = m.world(2, k);
        const double dz = z - l.cz;
        const double zeta = dz / l.h;
        const double zeta4 = zeta * zeta * zeta * zeta;
        for (int i = 0; i < m.shape[0]; ++i) {
            const double x = m.world(0, i);
            const double dx = x - l.cx;
            const double yb = b(x, z);
            for (int j = 0; j < m.shape[1]; ++j) {
                const double y = m.world(1, j);
                const double dy = y - l.cy;
                const std::size_t v = m.index(i, j, k);
                if (y < yb) {
                    const double rho2 = (dx / l.rx) * (dx / l.rx) + (dy / l.ry) * (dy / l.ry);
                    if (rho2 * rho2 + zeta4 <= 1.0) {
                        out.body.data[v] = 1;
                    }
                    continue;
                }
                bool bone = false;
                if (std::abs(dz) <= ha) {
                    const double dyc = y - l.canal_y;
                    // pedicles
                    if (y <= l.canal_y && std::abs(std::abs(dx) - ped_center) <= 0.5 * t) bone = true;
                    // posterior half ring
                    if (!bone && dyc >= 0.0) {
                        const double r = std::hypot(dx, dyc);
                        if (r >= rc && r <= rc + t) bone = true;
                    }
                    if (!bone && std::abs(dz) <= hp) {
                        if (std::abs(dx) <= 0.5 * w && y >= spin_start && y <= spin_end) bone = true;
                        if (!bone && std::abs(dyc) <= 0.5 * w) {
                            const double reach = dx < 0 ? params.process_lengths_mm[1] : params.process_lengths_mm[2];
                            if (std::abs(dx) >= ped_center && std::abs(dx) <= rc + t + reach) bone = true;
                        }
                    }
                }
                if (bone) out.posterior.data[v] = 1;
            }
        }
    }
    for (std::size_t v = 0; v < out.vertebra.data.size(); ++v) {
        out.vertebra.data[v] = out.body.data[v] | out.posterior.data[v];
    }
    if (out.body.empty() || out.posterior.empty()) {
        throw std::invalid_argument("phantom: parameters produce an empty substructure");
    }
    return out;
}

PhantomParams jittered_params(const PhantomParams& base, std::uint64_t seed, int index, const PhantomJitter& jitter) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(index));
    Rng rng(s);
    PhantomParams p = base;
    const double scale = 1.0 + rng.uniform(-jitter.size_fraction, jitter.size_fraction);
    p.body_radius_mm = {base.body_radius_mm[0] * scale, base.body_radius_mm[1] * scale};
    p.arch_thickness_mm *= scale;
    p.canal_radius_mm *= scale;
    p.pedicle_length_mm *= scale;
    p.arch_half_height_mm *= scale;
    p.process_width_mm *= scale;
    for (auto& len : p.process_lengths_mm) len *= scale;
    for (int a = 0; a < 3; ++a) {
        p.offset_mm[a] = base.offset_mm[a] + rng.uniform(-jitter.offset_mm, jitter.offset_mm);
    }
    for (int a = 0; a < 2; ++a) {
        p.boundary_tilt[a] = base.boundary_tilt[a] + rng.uniform(jitter.tilt_range[0], jitter.tilt_range[1]);
    }
    p.boundary_curve_amplitude_mm = rng.uniform(jitter.curve_range_mm[0], jitter.curve_range_mm[1]);
    p.seed = s;
    return p;
}

std::vector<Phantom> phantom_batch(int n, const PhantomParams& base, std::uint64_t seed, const PhantomJitter& jitter) {
    if (n < 1) {
        throw std::invalid_argument("phantom_batch: n must be >= 1");
    }
    std::vector<Phantom> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(generate_phantom(jittered_params(base, seed, i, jitter)));
    }
    return out;
}

std::array<double, 2> boundary_side_fractions(const Phantom& p) {
    const auto& m = p.vertebra.meta;
    std::size_t body_ok = 0, post_ok = 0;
    for (int k = 0; k < m.shape[2]; ++k) {
        for (int j = 0; j < m.shape[1]; ++j) {
            for (int i = 0; i < m.shape[0]; ++i) {
                const std::size_t v = m.index(i, j, k);
                const double yb = p.true_boundary(m.world(0, i), m.world(2, k));
                const double y = m.world(1, j);
                if (p.body.data[v] && y < yb) ++body_ok;
                if (p.posterior.data[v] && y >= yb) ++post_ok;
            }
        }
    }
    const auto nb = p.body.count();
    const auto np = p.posterior.count();
    return {nb ? static_cast<double>(body_ok) / nb : 1.0, np ? static_cast<double>(post_ok) / np : 1.0};
}

nlohmann::json params_to_json(const PhantomParams& p) {
    return {
        {"volume", meta_to_json(p.volume)},
        {"body_radius_mm", p.body_radius_mm},
        {"body_depth_ratio", p.body_depth_ratio},
        {"boundary_fraction", p.boundary_fraction},
        {"arch_thickness_mm", p.arch_thickness_mm},
        {"canal_radius_mm", p.canal_radius_mm},
        {"pedicle_length_mm", p.pedicle_length_mm},
        {"arch_half_height_mm", p.arch_half_height_mm},
        {"process_width_mm", p.process_width_mm},
        {"process_lengths_mm", p.process_lengths_mm},
        {"boundary_curve_amplitude_mm", p.boundary_curve_amplitude_mm},
        {"boundary_tilt", p.boundary_tilt},
        {"noise_amplitude_mm", p.noise_amplitude_mm},
        {"offset_mm", p.offset_mm},
        {"seed", p.seed},
    };
}

PhantomParams params_from_json(const nlohmann::json& doc) {
    PhantomParams p;
    if (doc.contains("volume")) p.volume = meta_from_json(doc.at("volume"));
    auto get = [&](const char* key, auto& field) {
        if (doc.contains(key)) doc.at(key).get_to(field);
    };
    get("body_radius_mm", p.body_radius_mm);
    get("body_depth_ratio", p.body_depth_ratio);
    get("boundary_fraction", p.boundary_fraction);
    get("arch_thickness_mm", p.arch_thickness_mm);
    get("canal_radius_mm", p.canal_radius_mm);
    get("pedicle_length_mm", p.pedicle_length_mm);
    get("arch_half_height_mm", p.arch_half_height_mm);
    get("process_width_mm", p.process_width_mm);
    get("process_lengths_mm", p.process_lengths_mm);
    get("boundary_curve_amplitude_mm", p.boundary_curve_amplitude_mm);
    get("boundary_tilt", p.boundary_tilt);
    get("noise_amplitude_mm", p.noise_amplitude_mm);
    get("offset_mm", p.offset_mm);
    get("seed", p.seed);
    return p;
}

nlohmann::json boundary_to_json(const BoundaryModel& b) {
    return {
        {"center_mm", b.center_mm},
        {"offset_mm", b.offset_mm},
        {"radius_mm", b.radius_mm},
        {"curve_amplitude_mm", b.curve_amplitude_mm},
        {"tilt", b.tilt},
        {"noise_amplitude_mm", b.noise_amplitude_mm},
        {"noise_modes", b.noise_modes},
    };
}

BoundaryModel boundary_from_json(const nlohmann::json& doc) {
    BoundaryModel b;
    doc.at("center_mm").get_to(b.center_mm);
    doc.at("offset_mm").get_to(b.offset_mm);
    doc.at("radius_mm").get_to(b.radius_mm);
    doc.at("curve_amplitude_mm").get_to(b.curve_amplitude_mm);
    doc.at("tilt").get_to(b.tilt);
    doc.at("noise_amplitude_mm").get_to(b.noise_amplitude_mm);
    doc.at("noise_modes").get_to(b.noise_modes);
    return b;
}

void save_phantom(const std::filesystem::path& dir, const Phantom& p) {
    std::filesystem::create_directories(dir);
    write_mask(dir / "vertebra", p.vertebra);
    write_mask(dir / "body", p.body);
    write_mask(dir / "posterior", p.posterior);
    nlohmann::json doc = {
        {"params", params_to_json(p.params)},
        {"true_boundary", boundary_to_json(p.true_boundary)},
        {"label", p.label},
        {"height_axis", "y"},
    };
    write_file_atomic(dir / "params.json", doc.dump(2) + "\n");
}

Phantom load_phantom(const std::filesystem::path& dir) {
    const auto doc = nlohmann::json::parse(read_text_file(dir / "params.json"));
    Phantom p;
    p.params = params_from_json(doc.at("params"));
    p.true_boundary = boundary_from_json(doc.at("true_boundary"));
    p.label = doc.value("label", "");
    p.vertebra = read_mask(dir / "vertebra");
    p.body = read_mask(dir / "body");
    p.posterior = read_mask(dir / "posterior");
    return p;
}

}  // namespace tpsplit
