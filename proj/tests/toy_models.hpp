// Small networks and phantom settings shared by the tests and the acceptance
// runner.

#pragma once

#include "tpsplit/nn.hpp"
#include "tpsplit/phantom.hpp"

namespace toy {

/// Frozen shape model for volumes of `2 * side` voxels per axis.
inline tpsplit::nn::ShapeModel small_cae(int side, std::uint64_t seed) {
    using tpsplit::nn::LayerSpec;
    const int c = (side - 2) / 2 + 1;
    tpsplit::nn::ShapeModel m;
    m.encoder = tpsplit::nn::Network({{1, side, side, side},
                                      {LayerSpec::conv3d(1, 4, 2, 2), LayerSpec::sigmoid(), LayerSpec::flatten(),
                                       LayerSpec::dense(4 * c * c * c, 12)},
                                      seed});
    m.decoder = tpsplit::nn::Network({{12},
                                      {LayerSpec::dense(12, 24), LayerSpec::sigmoid(),
                                       LayerSpec::dense(24, side * side * side), LayerSpec::sigmoid(),
                                       LayerSpec::reshape({1, side, side, side})},
                                      seed + 1});
    m.input_factor = 2;
    m.frozen = true;
    return m;
}

/// Voxel-wise shape model: every output depends on the matching input only.
inline tpsplit::nn::ShapeModel pointwise_cae(int side) {
    using tpsplit::nn::LayerSpec;
    tpsplit::nn::ShapeModel m;
    m.encoder = tpsplit::nn::Network({{1, side, side, side}, {LayerSpec::conv3d(1, 2, 1, 1), LayerSpec::sigmoid()}, 0},
                                     {1.3, -0.7, 0.2, 0.1});
    m.decoder = tpsplit::nn::Network({{2, side, side, side}, {LayerSpec::conv3d(2, 1, 1, 1), LayerSpec::sigmoid()}, 0},
                                     {2.0, -1.5, 0.3});
    m.input_factor = 2;
    m.frozen = true;
    return m;
}

/// Default phantom layout on a coarser grid of `n` voxels per side.
inline tpsplit::PhantomParams phantom_params(int n) {
    tpsplit::PhantomParams p;
    p.volume = tpsplit::cubic_meta(n, 64.0 / n);
    return p;
}

}  // namespace toy
