// Partition pipelines: control heights -> TPS surface -> axial distance ->
// sigmoid mask -> soft body mask -> (shape-model reconstruction | supervised)
// loss, with the exact gradient of the loss with respect to the heights.

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsplit/nn.hpp"
#include "tpsplit/phantom.hpp"
#include "tpsplit/tps.hpp"
#include "tpsplit/voxel.hpp"

namespace tpsplit {

enum class HeightInit {
    occupied_midplane,  // middle of the mask's bounding box along the height axis
    volume_midplane,    // middle of the volume along the height axis
};

struct FitConfig {
    std::vector<std::array<int, 2>> grids{{8, 8}, {10, 10}, {16, 16}, {32, 32}};
    double tau_mm = 1.0;
    int iterations = 300;
    double learning_rate = 0.5;  // mm per Adam step
    std::uint64_t seed = 0;
    HeightInit init = HeightInit::occupied_midplane;
    double threshold = 0.5;
    int height_axis = 1;
    bool flip = false;            // false: body lies on the negative-distance side
    double bending_weight = 0.0;  // optional w^T K w penalty
    double sv_cutoff = 1e-10;
    double smoothing = 0.0;

    /// Throws std::invalid_argument on non-positive iterations/tau or a bad axis.
    void validate() const;
};

nlohmann::json fit_config_to_json(const FitConfig& cfg);
FitConfig fit_config_from_json(const nlohmann::json& doc, FitConfig base = {});

/// Parses "8x8" into {8, 8}; a bare square count such as "64" maps to {8, 8}.
std::array<int, 2> parse_grid(const std::string& text);

ControlGrid grid_for_volume(const GridMeta& meta, std::array<int, 2> dims, const FitConfig& cfg);

std::vector<double> initial_heights(const BinaryMask& vertebra, const ControlGrid& grid, const FitConfig& cfg);

struct LossAndGrad {
    double loss = 0.0;
    Eigen::VectorXd grad;  // d loss / d heights
};

/// Precomputed geometry for repeatedly evaluating the chain on one mask.
class PartitionChain {
public:
    PartitionChain(const BinaryMask& vertebra, const ControlGrid& grid, const FitConfig& cfg);

    const BinaryMask& vertebra() const { return vertebra_; }
    const ControlGrid& grid() const { return sampler_.grid(); }

    /// V * sigmoid(s * d / tau): soft body mask at full resolution.
    ScalarField body_soft(const Eigen::VectorXd& heights) const;
    /// V * sigmoid(-s * d / tau).
    ScalarField posterior_soft(const Eigen::VectorXd& heights) const;

    /// Shape-model reconstruction loss of the pooled soft body mask.
    LossAndGrad cae_loss(const Eigen::VectorXd& heights, const nn::ShapeModel& cae) const;
    /// Mean squared difference between the soft body mask and a reference.
    LossAndGrad supervised_loss(const Eigen::VectorXd& heights, const BinaryMask& body_ref) const;

    /// d loss / d distance for every voxel of the volume under the shape-model
    /// loss, evaluated densely (no occupancy shortcut). The derivative passes
    /// through the mask product, so it is exactly zero wherever the vertebra
    /// mask is zero.
    ScalarField distance_sensitivity(const Eigen::VectorXd& heights, const nn::ShapeModel& cae) const;

    /// Adds the optional bending penalty to a loss/gradient pair.
    void add_bending(const Eigen::VectorXd& heights, LossAndGrad& lg) const;

private:
    struct Voxel {
        std::size_t index;   // into the full volume
        std::size_t column;  // into the compact column list
        double height;       // world coordinate along the height axis
    };

    Eigen::VectorXd body_probabilities(const Eigen::VectorXd& heights) const;
    Eigen::VectorXd pull_back(const Eigen::VectorXd& heights, const std::vector<double>& voxel_grad) const;

    BinaryMask vertebra_;
    FitConfig cfg_;
    std::vector<Voxel> voxels_;
    SurfaceSampler sampler_;
    double body_sign_;
};

/// Spec-shaped convenience wrapper around PartitionChain::cae_loss().
LossAndGrad chain_loss_and_grad(const BinaryMask& vertebra, const Eigen::VectorXd& heights, const ControlGrid& grid,
                                const nn::ShapeModel& cae, const FitConfig& cfg);

struct PartitionResult {
    TpsSurface surface;
    ScalarField body_soft;
    ScalarField posterior_soft;
    BinaryMask body_hard;
    BinaryMask posterior_hard;
    std::vector<std::pair<int, double>> loss_trace;
    int best_iteration = 0;
};

class FitDivergence : public std::runtime_error {
public:
    FitDivergence(const std::string& what, std::vector<std::pair<int, double>> trace)
        : std::runtime_error(what), trace_(std::move(trace)) {}
    const std::vector<std::pair<int, double>>& trace() const { return trace_; }

private:
    std::vector<std::pair<int, double>> trace_;
};

/// Adam on the control heights against the frozen shape model; returns the
/// best-loss iterate.
PartitionResult fit_heights_direct(const BinaryMask& vertebra, const ControlGrid& grid, const nn::ShapeModel& cae,
                                   const FitConfig& cfg, std::optional<std::vector<double>> init = std::nullopt);

/// Adam on the control heights against a paired reference body mask.
PartitionResult fit_heights_supervised(const BinaryMask& vertebra, const BinaryMask& body_ref, const ControlGrid& grid,
                                       const FitConfig& cfg, std::optional<std::vector<double>> init = std::nullopt);

/// Builds the partition result for fixed heights.
PartitionResult partition_with_heights(const PartitionChain& chain, const Eigen::VectorXd& heights,
                                       const FitConfig& cfg);

struct CaeTrainConfig {
    int epochs = 300;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double validation_fraction = 0.2;
    std::uint64_t seed = 1;
    int side = 32;
    int bottleneck = 64;
    int hidden = 128;
};

struct CaeTrainResult {
    nn::ShapeModel model;
    double initial_validation_loss = 0.0;
    std::vector<double> epoch_losses;
};

/// Pooled tensor fed to the shape model for a full-resolution field.
nn::Tensor shape_model_input(const ScalarField& field, const nn::ShapeModel& cae);

/// Trains the shape model on body masks only and freezes it.
CaeTrainResult pretrain_cae(const std::vector<BinaryMask>& bodies, const CaeTrainConfig& tc);

/// Mean reconstruction loss over masks.
double mean_reconstruction_loss(const nn::ShapeModel& cae, const std::vector<BinaryMask>& masks);

struct RegressorTrainConfig {
    int epochs = 40;
    int batch_size = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
    int input_factor = 4;
    double output_scale_mm = 10.0;
};

struct RegressorTrainResult {
    nn::RegressorModel model;
    std::vector<double> epoch_losses;
};

/// Trains the height regressor end-to-end through the shape-model loss.
RegressorTrainResult train_regressor(const std::vector<BinaryMask>& vertebrae, const ControlGrid& grid,
                                     const nn::ShapeModel& cae, const FitConfig& cfg,
                                     const RegressorTrainConfig& tc = {});

std::vector<double> regressor_heights(const nn::RegressorModel& model, const BinaryMask& vertebra);

struct InstanceMetrics {
    std::string name;
    std::string label;
    double dice = 0.0;
    double hausdorff_mm = 0.0;
    std::optional<double> rms_height_mm;
};

struct Aggregate {
    double mean = 0.0;
    double std = 0.0;
};

struct MetricsReport {
    std::vector<InstanceMetrics> instances;
    Aggregate dice;
    Aggregate hausdorff_mm;
    std::optional<Aggregate> rms_height_mm;
    nlohmann::json config;  // recorded fit settings
};

Aggregate aggregate(const std::vector<double>& values);

/// RMS of surface minus true boundary over columns holding both body and
/// posterior voxels.
std::optional<double> boundary_rms_error(const TpsSurface& surface, const Phantom& ref);

MetricsReport evaluate(const std::vector<PartitionResult>& results, const std::vector<Phantom>& refs,
                       const std::vector<std::string>& names = {});

nlohmann::json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& doc);
std::string report_to_csv(const MetricsReport& r);
MetricsReport report_from_csv(const std::string& csv);

}  // namespace tpsplit
