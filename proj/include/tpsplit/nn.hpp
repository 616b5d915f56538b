// Minimal sequential reverse-mode network engine.
//
// A network is an ordered list of layers with one flat parameter vector. A
// forward pass records every layer input on a Tape; backward() replays the
// tape in reverse to produce exact input and parameter gradients.
//
// Volumetric tensors are laid out (channels, z, y, x) with x fastest, matching
// the voxel grids.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsplit/tps.hpp"
#include "tpsplit/voxel.hpp"

namespace tpsplit::nn {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0);

    std::size_t size() const { return data.size(); }
};

std::size_t element_count(const std::vector<int>& shape);

enum class LayerKind { dense, conv3d, relu, sigmoid, flatten, reshape };

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int in = 0;   // dense: inputs, conv3d: input channels
    int out = 0;  // dense: outputs, conv3d: output channels
    int kernel = 1;
    int stride = 1;
    std::vector<int> shape;  // reshape target

    static LayerSpec dense(int in, int out) { return {LayerKind::dense, in, out, 1, 1, {}}; }
    static LayerSpec conv3d(int in_ch, int out_ch, int kernel, int stride) {
        return {LayerKind::conv3d, in_ch, out_ch, kernel, stride, {}};
    }
    static LayerSpec relu() { return {LayerKind::relu, 0, 0, 1, 1, {}}; }
    static LayerSpec sigmoid() { return {LayerKind::sigmoid, 0, 0, 1, 1, {}}; }
    static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 1, 1, {}}; }
    static LayerSpec reshape(std::vector<int> s) { return {LayerKind::reshape, 0, 0, 1, 1, std::move(s)}; }

    bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
    std::vector<int> input_shape;
    std::vector<LayerSpec> layers;
    std::uint64_t init_seed = 0;

    bool operator==(const NetworkSpec&) const = default;
};

/// Output shape of every layer; throws std::invalid_argument when adjacent
/// shapes do not compose.
std::vector<std::vector<int>> infer_shapes(const NetworkSpec& spec);

std::string layer_name(const LayerSpec& layer);

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& doc);

class Network {
public:
    Network() = default;
    /// Glorot-uniform weights and zero biases drawn from spec.init_seed.
    explicit Network(NetworkSpec spec);
    Network(NetworkSpec spec, std::vector<double> params);

    const NetworkSpec& spec() const { return spec_; }
    const std::vector<int>& input_shape() const { return spec_.input_shape; }
    const std::vector<int>& output_shape() const { return shapes_.back(); }
    std::size_t param_count() const { return params_.size(); }

    const std::vector<double>& params() const { return params_; }
    /// Mutable parameter access; invalidates outstanding tapes.
    std::vector<double>& mutable_params() {
        ++generation_;
        return params_;
    }

    std::size_t param_offset(std::size_t layer) const { return offsets_[layer]; }
    const std::vector<int>& layer_output_shape(std::size_t layer) const { return shapes_[layer + 1]; }
    std::uint64_t generation() const { return generation_; }

    /// CRC-32 over the little-endian f64 parameter bytes.
    std::string checksum() const;

private:
    void layout();

    NetworkSpec spec_;
    std::vector<double> params_;
    std::vector<std::size_t> offsets_;
    std::vector<std::vector<int>> shapes_;  // shapes_[0] is the input shape
    std::uint64_t generation_ = 0;
};

/// Record of one forward pass: the input of every layer, bound to the network
/// state that produced it.
struct Tape {
    const Network* network = nullptr;
    std::uint64_t generation = 0;
    std::vector<Tensor> inputs;
};

struct ForwardResult {
    Tensor output;
    Tape tape;
};

ForwardResult forward(const Network& net, const Tensor& input);

/// Output only, without recording.
Tensor predict(const Network& net, const Tensor& input);

struct Gradients {
    Tensor input_grad;
    std::vector<double> param_grads;  // empty unless requested
};

/// Gradients of <output, output_grad> with respect to the input and (when
/// `with_params`) every parameter.
Gradients backward(const Network& net, const Tape& tape, const Tensor& output_grad, bool with_params = true);

struct LossGrad {
    double loss = 0.0;
    Tensor grad;
};

/// Mean squared difference and its gradient with respect to `a`.
LossGrad mse(const Tensor& a, const Tensor& b);

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& hyper);

/// Autoencoder acting as a fixed shape prior.
struct ShapeModel {
    Network encoder;
    Network decoder;
    bool frozen = false;
    double validation_loss = 0.0;  // recorded at the end of training
    int input_factor = 2;          // downsampling from the full-resolution volume

    const std::vector<int>& input_shape() const { return encoder.input_shape(); }
    /// Combined CRC-32 of both parameter vectors.
    std::string checksum() const;
};

/// Conv encoder (two stride-2 conv3d, dense bottleneck) and dense decoder
/// with sigmoid output, for a cubic single-channel input of `side` voxels.
ShapeModel make_shape_model(int side = 32, int bottleneck = 64, int hidden = 128, std::uint64_t seed = 1,
                            int input_factor = 2);

Tensor reconstruct(const ShapeModel& model, const Tensor& x);

/// MSE(decode(encode(x)), x) with its full derivative with respect to x.
LossGrad reconstruction_loss(const ShapeModel& model, const Tensor& x);

struct ReconstructionParamGrads {
    double loss = 0.0;
    std::vector<double> encoder;
    std::vector<double> decoder;
};

/// Loss with parameter gradients for training; rejects frozen models.
ReconstructionParamGrads reconstruction_param_grads(const ShapeModel& model, const Tensor& x);

/// Maps a downsampled vertebra mask to control heights:
/// heights = reference_mm + output_scale_mm * net(x).
struct RegressorModel {
    Network net;
    int input_factor = 4;
    double reference_mm = 0.0;
    double output_scale_mm = 10.0;
    int nx = 0;
    int nz = 0;

    std::size_t output_count() const { return element_count(net.output_shape()); }
};

RegressorModel make_regressor(int side, const ControlGrid& grid, double reference_mm, std::uint64_t seed = 1,
                              int input_factor = 4, double output_scale_mm = 10.0);

Tensor field_to_tensor(const ScalarField& field);
ScalarField tensor_to_field(const Tensor& t, const GridMeta& meta);

// Model files: "<stem>.json" (specs, metadata, payload checksum) and
// "<stem>.bin" (little-endian f32 parameters). Loading fails on checksum
// mismatch.
void save_shape_model(const std::filesystem::path& stem, const ShapeModel& model);
ShapeModel load_shape_model(const std::filesystem::path& stem);
void save_regressor(const std::filesystem::path& stem, const RegressorModel& model);
RegressorModel load_regressor(const std::filesystem::path& stem);

}  // namespace tpsplit::nn
