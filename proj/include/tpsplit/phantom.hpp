// Synthetic vertebra-like phantoms with known partition ground truth.
//
// Layout (height axis y, increasing posteriorly): an elliptic rounded cylinder
// for the body, cut by a tilted and gently curved boundary surface; behind the
// cut, two pedicles lead to a half-ring arch around the canal, from which the
// spinous and both transverse processes extend. Everything anterior of the
// boundary is body, everything posterior is posterior elements.
//
// Randomness: std::mt19937_64 seeded from splitmix64-derived seeds; doubles
// are formed from the top 53 bits of each draw. No std distributions are used,
// so sequences are identical across standard libraries.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsplit/voxel.hpp"

namespace tpsplit {

/// splitmix64 finalizer; used to derive independent seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

/// Portable uniform sampler on top of mt19937_64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal();
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

struct PhantomParams {
    GridMeta volume = cubic_meta(64);
    std::array<double, 2> body_radius_mm{12.0, 10.0};  // in-plane (x), axial half-height (z)
    double body_depth_ratio = 0.75;                    // y radius over x radius
    double boundary_fraction = 0.5;                    // cut depth behind the body center, in y radii
    double arch_thickness_mm = 3.5;
    double canal_radius_mm = 6.5;
    double pedicle_length_mm = 4.0;
    double arch_half_height_mm = 6.0;
    double process_width_mm = 3.0;
    std::array<double, 3> process_lengths_mm{12.0, 10.0, 10.0};  // spinous, left, right transverse
    double boundary_curve_amplitude_mm = 1.0;
    std::array<double, 2> boundary_tilt{0.05, 0.08};  // dy/dx, dy/dz
    double noise_amplitude_mm = 0.3;
    std::array<double, 3> offset_mm{0.0, 0.0, 0.0};  // shift from the centered layout
    std::uint64_t seed = 1;

    bool operator==(const PhantomParams&) const = default;
};

/// Per-instance randomization used by phantom_batch().
struct PhantomJitter {
    double size_fraction = 0.25;                      // all lengths scaled by 1 +- this
    double offset_mm = 3.0;                           // per-axis translation
    std::array<double, 2> tilt_range{-0.12, 0.12};    // added to each base slope
    std::array<double, 2> curve_range_mm{-1.0, 2.0};  // replaces the base amplitude
};

/// Analytic boundary y = f(x, z) in world mm.
struct BoundaryModel {
    std::array<double, 3> center_mm{};  // body center
    double offset_mm = 0.0;             // boundary height at the center, before noise
    double radius_mm = 1.0;             // curvature normalization (body x radius)
    double curve_amplitude_mm = 0.0;
    std::array<double, 2> tilt{};
    double noise_amplitude_mm = 0.0;
    std::vector<std::array<double, 3>> noise_modes;  // (freq x, freq z, phase)

    double operator()(double x, double z) const;
};

struct Phantom {
    PhantomParams params;
    BinaryMask vertebra;
    BinaryMask body;
    BinaryMask posterior;
    BoundaryModel true_boundary;
    std::string label;
};

Phantom generate_phantom(const PhantomParams& params);

/// n phantoms with parameters jittered from `base`; instance i uses
/// mix_seed(seed, i) for both its jitter and its surface roughness.
std::vector<Phantom> phantom_batch(int n, const PhantomParams& base, std::uint64_t seed,
                                   const PhantomJitter& jitter = {});

/// The i-th jittered parameter set of phantom_batch().
PhantomParams jittered_params(const PhantomParams& base, std::uint64_t seed, int index,
                              const PhantomJitter& jitter = {});

/// Fraction of body voxels anterior of the boundary and of posterior voxels
/// on or behind it.
std::array<double, 2> boundary_side_fractions(const Phantom& p);

nlohmann::json params_to_json(const PhantomParams& p);
PhantomParams params_from_json(const nlohmann::json& doc);
nlohmann::json boundary_to_json(const BoundaryModel& b);
BoundaryModel boundary_from_json(const nlohmann::json& doc);

// Directory with vertebra/body/posterior masks plus params.json.
void save_phantom(const std::filesystem::path& dir, const Phantom& p);
Phantom load_phantom(const std::filesystem::path& dir);

}  // namespace tpsplit
