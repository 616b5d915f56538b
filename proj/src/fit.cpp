#include "tpsplit/fit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace tpsplit {

void FitConfig::validate() const {
    if (iterations < 0) throw std::invalid_argument("fit: iterations must be >= 0");
    if (!(tau_mm > 0.0)) throw std::invalid_argument("fit: tau must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("fit: learning rate must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("fit: threshold must lie in (0, 1)");
    if (height_axis < 0 || height_axis > 2) throw std::invalid_argument("fit: height axis must be 0, 1 or 2");
    if (bending_weight < 0.0) throw std::invalid_argument("fit: bending weight must be >= 0");
    for (const auto& g : grids) {
        if (g[0] < 2 || g[1] < 2) throw std::invalid_argument("fit: grid sizes must be at least 2x2");
    }
}

nlohmann::json fit_config_to_json(const FitConfig& cfg) {
    nlohmann::json grids = nlohmann::json::array();
    for (const auto& g : cfg.grids) grids.push_back(std::to_string(g[0]) + "x" + std::to_string(g[1]));
    return {
        {"grids", grids},
        {"tau_mm", cfg.tau_mm},
        {"iterations", cfg.iterations},
        {"learning_rate", cfg.learning_rate},
        {"seed", cfg.seed},
        {"init", cfg.init == HeightInit::occupied_midplane ? "occupied_midplane" : "volume_midplane"},
        {"threshold", cfg.threshold},
        {"height_axis", std::string(1, "xyz"[cfg.height_axis])},
        {"flip", cfg.flip},
        {"bending_weight", cfg.bending_weight},
        {"sv_cutoff", cfg.sv_cutoff},
        {"smoothing", cfg.smoothing},
        {"optimizer", "adam"},
    };
}

FitConfig fit_config_from_json(const nlohmann::json& doc, FitConfig cfg) {
    if (doc.contains("grids")) {
        cfg.grids.clear();
        for (const auto& g : doc.at("grids")) {
            cfg.grids.push_back(g.is_string() ? parse_grid(g.get<std::string>())
                                              : parse_grid(std::to_string(g.get<int>())));
        }
    }
    cfg.tau_mm = doc.value("tau_mm", cfg.tau_mm);
    cfg.iterations = doc.value("iterations", cfg.iterations);
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.seed = doc.value("seed", cfg.seed);
    if (doc.contains("init")) {
        const auto init = doc.at("init").get<std::string>();
        if (init == "occupied_midplane") {
            cfg.init = HeightInit::occupied_midplane;
        } else if (init == "volume_midplane") {
            cfg.init = HeightInit::volume_midplane;
        } else {
            throw std::invalid_argument("unknown height init '" + init + "'");
        }
    }
    cfg.threshold = doc.value("threshold", cfg.threshold);
    if (doc.contains("height_axis")) cfg.height_axis = parse_axis(doc.at("height_axis").get<std::string>());
    cfg.flip = doc.value("flip", cfg.flip);
    cfg.bending_weight = doc.value("bending_weight", cfg.bending_weight);
    cfg.sv_cutoff = doc.value("sv_cutoff", cfg.sv_cutoff);
    cfg.smoothing = doc.value("smoothing", cfg.smoothing);
    cfg.validate();
    return cfg;
}

std::array<int, 2> parse_grid(const std::string& text) {
    auto to_int = [&](std::string_view s) {
        int v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw std::invalid_argument("bad grid size '" + text + "'");
        }
        return v;
    };
    const auto x = text.find('x');
    std::array<int, 2> g{};
    if (x == std::string::npos) {
        const int n = to_int(text);
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
        if (side * side != n) {
            throw std::invalid_argument("grid count " + text + " is not a square; use <nx>x<nz>");
        }
        g = {side, side};
    } else {
        g = {to_int(std::string_view(text).substr(0, x)), to_int(std::string_view(text).substr(x + 1))};
    }
    if (g[0] < 2 || g[1] < 2) throw std::invalid_argument("grid '" + text + "' needs at least 2 points per axis");
    return g;
}

ControlGrid grid_for_volume(const GridMeta& meta, std::array<int, 2> dims, const FitConfig& cfg) {
    return make_control_grid(dims[0], dims[1], volume_extent(meta, cfg.height_axis), cfg.sv_cutoff, cfg.smoothing);
}

std::vector<double> initial_heights(const BinaryMask& vertebra, const ControlGrid& grid, const FitConfig& cfg) {
    const auto& m = vertebra.meta;
    const int axis = cfg.height_axis;
    double mid = m.world(axis, 0) + 0.5 * (m.shape[axis] - 1) * m.spacing[axis];
    if (cfg.init == HeightInit::occupied_midplane && !vertebra.empty()) {
        int lo = m.shape[axis], hi = -1;
        for (int k = 0; k < m.shape[2]; ++k)
            for (int j = 0; j < m.shape[1]; ++j)
                for (int i = 0; i < m.shape[0]; ++i) {
                    if (!vertebra.data[m.index(i, j, k)]) continue;
                    const int ijk[3] = {i, j, k};
                    lo = std::min(lo, ijk[axis]);
                    hi = std::max(hi, ijk[axis]);
                }
        mid = 0.5 * (m.world(axis, lo) + m.world(axis, hi));
    }
    return std::vector<double>(grid.size(), mid);
}

// ---------------------------------------------------------------------------

namespace {

struct ChainSetup {
    std::vector<Point2> queries;
    std::vector<std::size_t> voxel_index;
    std::vector<std::size_t> voxel_column;
    std::vector<double> voxel_height;
};

ChainSetup setup_chain(const BinaryMask& vertebra, int axis) {
    const auto& m = vertebra.meta;
    const auto all_columns = column_points(m, axis);
    std::vector<std::ptrdiff_t> compact(all_columns.size(), -1);
    ChainSetup s;
    for (int k = 0; k < m.shape[2]; ++k)
        for (int j = 0; j < m.shape[1]; ++j)
            for (int i = 0; i < m.shape[0]; ++i) {
                const std::size_t v = m.index(i, j, k);
                if (!vertebra.data[v]) continue;
                const std::size_t col = column_of(m, axis, i, j, k);
                if (compact[col] < 0) {
                    compact[col] = static_cast<std::ptrdiff_t>(s.queries.size());
                    s.queries.push_back(all_columns[col]);
                }
                const int ijk[3] = {i, j, k};
                s.voxel_index.push_back(v);
                s.voxel_column.push_back(static_cast<std::size_t>(compact[col]));
                s.voxel_height.push_back(m.world(axis, ijk[axis]));
            }
    return s;
}

}  // namespace

PartitionChain::PartitionChain(const BinaryMask& vertebra, const ControlGrid& grid, const FitConfig& cfg)
    : vertebra_(vertebra), cfg_(cfg), sampler_(grid, {}), body_sign_(cfg.flip ? 1.0 : -1.0) {
    cfg_.validate();
    vertebra_.meta.validate();
    if (vertebra_.data.size() != vertebra_.meta.voxel_count()) {
        throw std::invalid_argument("PartitionChain: mask data length does not match its geometry");
    }
    auto s = setup_chain(vertebra_, cfg_.height_axis);
    sampler_ = SurfaceSampler(grid, s.queries);
    voxels_.reserve(s.voxel_index.size());
    for (std::size_t i = 0; i < s.voxel_index.size(); ++i) {
        voxels_.push_back({s.voxel_index[i], s.voxel_column[i], s.voxel_height[i]});
    }
}

Eigen::VectorXd PartitionChain::body_probabilities(const Eigen::VectorXd& heights) const {
    const Eigen::VectorXd f = sampler_.values(heights);
    Eigen::VectorXd p(static_cast<Eigen::Index>(voxels_.size()));
    const double scale = body_sign_ / cfg_.tau_mm;
    for (std::size_t i = 0; i < voxels_.size(); ++i) {
        const auto& v = voxels_[i];
        const double d = v.height - f(static_cast<Eigen::Index>(v.column));
        p(static_cast<Eigen::Index>(i)) = sigmoid(scale * d);
    }
    return p;
}

ScalarField PartitionChain::body_soft(const Eigen::VectorXd& heights) const {
    const auto p = body_probabilities(heights);
    ScalarField out(vertebra_.meta);
    for (std::size_t i = 0; i < voxels_.size(); ++i) out.data[voxels_[i].index] = p(static_cast<Eigen::Index>(i));
    return out;
}

ScalarField PartitionChain::posterior_soft(const Eigen::VectorXd& heights) const {
    const Eigen::VectorXd f = sampler_.values(heights);
    ScalarField out(vertebra_.meta);
    const double scale = -body_sign_ / cfg_.tau_mm;
    for (const auto& v : voxels_) {
        out.data[v.index] = sigmoid(scale * (v.height - f(static_cast<Eigen::Index>(v.column))));
    }
    return out;
}

// voxel_grad holds d loss / d body_soft per occupied voxel.
Eigen::VectorXd PartitionChain::pull_back(const Eigen::VectorXd& heights, const std::vector<double>& voxel_grad) const {
    const Eigen::VectorXd p = body_probabilities(heights);
    Eigen::VectorXd grad_f = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sampler_.query_count()));
    const double scale = body_sign_ / cfg_.tau_mm;
    for (std::size_t i = 0; i < voxels_.size(); ++i) {
        const double pi = p(static_cast<Eigen::Index>(i));
        // d p / d d = scale * p (1 - p); d d / d f = -1
        grad_f(static_cast<Eigen::Index>(voxels_[i].column)) -= voxel_grad[i] * scale * pi * (1.0 - pi);
    }
    return sampler_.pullback(grad_f);
}

nn::Tensor shape_model_input(const ScalarField& field, const nn::ShapeModel& cae) {
    nn::Tensor t = nn::field_to_tensor(downsample(field, cae.input_factor));
    if (t.shape != cae.input_shape()) {
        throw std::invalid_argument("shape model input shape does not match the pooled volume");
    }
    return t;
}

LossAndGrad PartitionChain::cae_loss(const Eigen::VectorXd& heights, const nn::ShapeModel& cae) const {
    const ScalarField body = body_soft(heights);
    const nn::Tensor x = shape_model_input(body, cae);
    const nn::LossGrad r = nn::reconstruction_loss(cae, x);
    const ScalarField coarse_grad = nn::tensor_to_field(r.grad, downsample(body, cae.input_factor).meta);
    const ScalarField fine_grad = downsample_adjoint(coarse_grad, vertebra_.meta, cae.input_factor);
    std::vector<double> voxel_grad(voxels_.size());
    for (std::size_t i = 0; i < voxels_.size(); ++i) voxel_grad[i] = fine_grad.data[voxels_[i].index];
    LossAndGrad out{r.loss, pull_back(heights, voxel_grad)};
    add_bending(heights, out);
    return out;
}

LossAndGrad PartitionChain::supervised_loss(const Eigen::VectorXd& heights, const BinaryMask& body_ref) const {
    if (!(body_ref.meta == vertebra_.meta)) {
        throw std::invalid_argument("supervised loss: reference geometry mismatch");
    }
    const auto p = body_probabilities(heights);
    const double n = static_cast<double>(vertebra_.meta.voxel_count());
    double sum = 0.0;
    for (std::size_t v = 0; v < body_ref.data.size(); ++v) {
        if (body_ref.data[v] && !vertebra_.data[v]) sum += 1.0;
    }
    std::vector<double> voxel_grad(voxels_.size());
    for (std::size_t i = 0; i < voxels_.size(); ++i) {
        const double d = p(static_cast<Eigen::Index>(i)) - (body_ref.data[voxels_[i].index] ? 1.0 : 0.0);
        sum += d * d;
        voxel_grad[i] = 2.0 * d / n;
    }
    LossAndGrad out{sum / n, pull_back(heights, voxel_grad)};
    add_bending(heights, out);
    return out;
}

ScalarField PartitionChain::distance_sensitivity(const Eigen::VectorXd& heights, const nn::ShapeModel& cae) const {
    const auto& meta = vertebra_.meta;
    const TpsSurface surface = solve_coefficients(grid(), heights);
    const ScalarField d = signed_axial_distance_field(surface, meta, cfg_.height_axis);
    const ScalarField m = soft_mask(d, cfg_.tau_mm, body_sign_ > 0.0 ? false : true);
    const ScalarField body = apply_mask(vertebra_, m);
    const nn::Tensor x = shape_model_input(body, cae);
    const nn::LossGrad r = nn::reconstruction_loss(cae, x);
    const ScalarField coarse_grad = nn::tensor_to_field(r.grad, downsample(body, cae.input_factor).meta);
    const ScalarField g_body = downsample_adjoint(coarse_grad, meta, cae.input_factor);
    ScalarField out(meta);
    const double scale = body_sign_ / cfg_.tau_mm;
    for (std::size_t v = 0; v < out.data.size(); ++v) {
        // d body / d m = V(v), d m / d d = scale * m (1 - m)
        const double occupancy = vertebra_.data[v] ? 1.0 : 0.0;
        out.data[v] = g_body.data[v] * occupancy * scale * m.data[v] * (1.0 - m.data[v]);
    }
    return out;
}

void PartitionChain::add_bending(const Eigen::VectorXd& heights, LossAndGrad& lg) const {
    if (cfg_.bending_weight <= 0.0) return;
    const auto n = static_cast<Eigen::Index>(grid().size());
    const auto A = grid().pinv().topLeftCorner(n, n);
    Eigen::MatrixXd K = grid().system_matrix().topLeftCorner(n, n);
    K.diagonal().setZero();
    const Eigen::VectorXd w = A * heights;
    const Eigen::VectorXd Kw = K * w;
    lg.loss += cfg_.bending_weight * w.dot(Kw);
    lg.grad += 2.0 * cfg_.bending_weight * (A.transpose() * Kw);
}

LossAndGrad chain_loss_and_grad(const BinaryMask& vertebra, const Eigen::VectorXd& heights, const ControlGrid& grid,
                                const nn::ShapeModel& cae, const FitConfig& cfg) {
    if (!cae.frozen) {
        throw std::invalid_argument("chain_loss_and_grad: shape model must be frozen");
    }
    return PartitionChain(vertebra, grid, cfg).cae_loss(heights, cae);
}

// ---------------------------------------------------------------------------

PartitionResult partition_with_heights(const PartitionChain& chain, const Eigen::VectorXd& heights,
                                       const FitConfig& cfg) {
    PartitionResult r;
    r.surface = solve_coefficients(chain.grid(), heights);
    r.body_soft = chain.body_soft(heights);
    r.posterior_soft = chain.posterior_soft(heights);
    r.body_hard = threshold(r.body_soft, cfg.threshold);
    r.posterior_hard = threshold(r.posterior_soft, cfg.threshold);
    return r;
}

namespace {

template <typename LossFn>
PartitionResult run_adam(const PartitionChain& chain, const FitConfig& cfg, std::vector<double> init, LossFn&& loss) {
    if (init.size() != chain.grid().size()) {
        throw std::invalid_argument("fit: initial height count does not match the grid");
    }
    Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(init.data(), static_cast<Eigen::Index>(init.size()));
    Eigen::VectorXd best_h = h;
    double best = std::numeric_limits<double>::infinity();
    int best_it = 0;
    std::vector<std::pair<int, double>> trace;
    trace.reserve(static_cast<std::size_t>(cfg.iterations) + 1);
    nn::AdamState state;
    const nn::AdamHyper hyper{cfg.learning_rate, 0.9, 0.999, 1e-8};
    for (int it = 0;; ++it) {
        const LossAndGrad lg = loss(h);
        trace.emplace_back(it, lg.loss);
        if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
            throw FitDivergence("fit diverged at iteration " + std::to_string(it), trace);
        }
        if (lg.loss < best) {
            best = lg.loss;
            best_h = h;
            best_it = it;
        }
        if (it >= cfg.iterations) break;
        adam_step(std::span<double>(h.data(), static_cast<std::size_t>(h.size())),
                  std::span<const double>(lg.grad.data(), static_cast<std::size_t>(lg.grad.size())), state, hyper);
    }
    PartitionResult r = partition_with_heights(chain, best_h, cfg);
    r.loss_trace = std::move(trace);
    r.best_iteration = best_it;
    return r;
}

}  // namespace

PartitionResult fit_heights_direct(const BinaryMask& vertebra, const ControlGrid& grid, const nn::ShapeModel& cae,
                                   const FitConfig& cfg, std::optional<std::vector<double>> init) {
    if (!cae.frozen) {
        throw std::invalid_argument("fit_heights_direct: shape model must be frozen");
    }
    const PartitionChain chain(vertebra, grid, cfg);
    auto h0 = init ? std::move(*init) : initial_heights(vertebra, grid, cfg);
    return run_adam(chain, cfg, std::move(h0), [&](const Eigen::VectorXd& h) { return chain.cae_loss(h, cae); });
}

PartitionResult fit_heights_supervised(const BinaryMask& vertebra, const BinaryMask& body_ref, const ControlGrid& grid,
                                       const FitConfig& cfg, std::optional<std::vector<double>> init) {
    if (!(vertebra.meta == body_ref.meta)) {
        throw std::invalid_argument("fit_heights_supervised: reference geometry mismatch");
    }
    const PartitionChain chain(vertebra, grid, cfg);
    auto h0 = init ? std::move(*init) : initial_heights(vertebra, grid, cfg);
    return run_adam(chain, cfg, std::move(h0),
                    [&](const Eigen::VectorXd& h) { return chain.supervised_loss(h, body_ref); });
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    return idx;
}

}  // namespace

double mean_reconstruction_loss(const nn::ShapeModel& cae, const std::vector<BinaryMask>& masks) {
    if (masks.empty()) throw std::invalid_argument("mean_reconstruction_loss: no masks");
    double sum = 0.0;
    for (const auto& m : masks) {
        const nn::Tensor x = shape_model_input(to_field(m), cae);
        sum += nn::mse(nn::reconstruct(cae, x), x).loss;
    }
    return sum / static_cast<double>(masks.size());
}

CaeTrainResult pretrain_cae(const std::vector<BinaryMask>& bodies, const CaeTrainConfig& tc) {
    if (bodies.empty()) throw std::invalid_argument("pretrain_cae: empty dataset");
    const auto& meta = bodies.front().meta;
    if (meta.shape[0] != meta.shape[1] || meta.shape[1] != meta.shape[2]) {
        throw std::invalid_argument("pretrain_cae: volumes must be cubic");
    }
    if (meta.shape[0] % tc.side != 0) {
        throw std::invalid_argument("pretrain_cae: model side must divide the volume side");
    }
    for (const auto& b : bodies) {
        if (!(b.meta == meta)) throw std::invalid_argument("pretrain_cae: inconsistent mask geometry");
    }
    const auto order = shuffled(bodies.size(), mix_seed(tc.seed, 0x73706c6974ULL));
    const auto n_val = static_cast<std::size_t>(std::floor(tc.validation_fraction * static_cast<double>(bodies.size())));
    const std::size_t n_train = bodies.size() - n_val;
    if (n_train < 20) throw std::invalid_argument("pretrain_cae: need at least 20 training masks");
    if (n_val < 1) throw std::invalid_argument("pretrain_cae: validation split is empty");

    CaeTrainResult out;
    out.model = nn::make_shape_model(tc.side, tc.bottleneck, tc.hidden, tc.seed, meta.shape[0] / tc.side);
    auto& model = out.model;

    std::vector<nn::Tensor> train, val;
    for (std::size_t i = 0; i < bodies.size(); ++i) {
        auto t = shape_model_input(to_field(bodies[order[i]]), model);
        (i < n_train ? train : val).push_back(std::move(t));
    }
    auto val_loss = [&]() {
        double s = 0.0;
        for (const auto& x : val) s += nn::mse(nn::reconstruct(model, x), x).loss;
        return s / static_cast<double>(val.size());
    };
    out.initial_validation_loss = val_loss();

    nn::AdamState enc_state, dec_state;
    const nn::AdamHyper hyper{tc.learning_rate, 0.9, 0.999, 1e-8};
    const auto batch = static_cast<std::size_t>(std::max(1, tc.batch_size));
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto perm = shuffled(train.size(), mix_seed(tc.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < perm.size(); start += batch) {
            const std::size_t end = std::min(perm.size(), start + batch);
            std::vector<double> ge(model.encoder.param_count(), 0.0), gd(model.decoder.param_count(), 0.0);
            for (std::size_t b = start; b < end; ++b) {
                const auto g = nn::reconstruction_param_grads(model, train[perm[b]]);
                epoch_loss += g.loss;
                for (std::size_t i = 0; i < ge.size(); ++i) ge[i] += g.encoder[i];
                for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.decoder[i];
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& v : ge) v *= inv;
            for (auto& v : gd) v *= inv;
            nn::adam_step(model.encoder.mutable_params(), ge, enc_state, hyper);
            nn::adam_step(model.decoder.mutable_params(), gd, dec_state, hyper);
        }
        out.epoch_losses.push_back(epoch_loss / static_cast<double>(train.size()));
    }
    model.validation_loss = val_loss();
    model.frozen = true;
    return out;
}

// ---------------------------------------------------------------------------

namespace {

nn::Tensor regressor_input(const nn::RegressorModel& model, const BinaryMask& vertebra) {
    nn::Tensor t = nn::field_to_tensor(downsample(to_field(vertebra), model.input_factor));
    if (t.shape != model.net.input_shape()) {
        throw std::invalid_argument("regressor input shape does not match the pooled volume");
    }
    return t;
}

}  // namespace

std::vector<double> regressor_heights(const nn::RegressorModel& model, const BinaryMask& vertebra) {
    const nn::Tensor out = nn::predict(model.net, regressor_input(model, vertebra));
    std::vector<double> h(out.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = model.reference_mm + model.output_scale_mm * out.data[i];
    return h;
}

RegressorTrainResult train_regressor(const std::vector<BinaryMask>& vertebrae, const ControlGrid& grid,
                                     const nn::ShapeModel& cae, const FitConfig& cfg, const RegressorTrainConfig& tc) {
    if (vertebrae.empty()) throw std::invalid_argument("train_regressor: empty dataset");
    if (!cae.frozen) throw std::invalid_argument("train_regressor: shape model must be frozen");
    const auto& meta = vertebrae.front().meta;
    for (const auto& v : vertebrae) {
        if (!(v.meta == meta)) throw std::invalid_argument("train_regressor: inconsistent mask geometry");
    }
    const int axis = cfg.height_axis;
    const double reference = meta.world(axis, 0) + 0.5 * (meta.shape[axis] - 1) * meta.spacing[axis];

    RegressorTrainResult out;
    out.model = nn::make_regressor(meta.shape[0], grid, reference, tc.seed, tc.input_factor, tc.output_scale_mm);
    auto& model = out.model;

    std::vector<PartitionChain> chains;
    std::vector<nn::Tensor> inputs;
    chains.reserve(vertebrae.size());
    for (const auto& v : vertebrae) {
        chains.emplace_back(v, grid, cfg);
        inputs.push_back(regressor_input(model, v));
    }

    nn::AdamState state;
    const nn::AdamHyper hyper{tc.learning_rate, 0.9, 0.999, 1e-8};
    const auto batch = static_cast<std::size_t>(std::max(1, tc.batch_size));
    const auto n = static_cast<Eigen::Index>(grid.size());
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto perm = shuffled(vertebrae.size(), mix_seed(tc.seed, 2000 + static_cast<std::uint64_t>(epoch)));
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < perm.size(); start += batch) {
            const std::size_t end = std::min(perm.size(), start + batch);
            std::vector<double> grads(model.net.param_count(), 0.0);
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t idx = perm[b];
                const auto fw = nn::forward(model.net, inputs[idx]);
                Eigen::VectorXd h(n);
                for (Eigen::Index i = 0; i < n; ++i) {
                    h(i) = model.reference_mm + model.output_scale_mm * fw.output.data[static_cast<std::size_t>(i)];
                }
                const LossAndGrad lg = chains[idx].cae_loss(h, cae);
                epoch_loss += lg.loss;
                nn::Tensor g(fw.output.shape);
                for (Eigen::Index i = 0; i < n; ++i) {
                    g.data[static_cast<std::size_t>(i)] = model.output_scale_mm * lg.grad(i);
                }
                const auto bw = nn::backward(model.net, fw.tape, g, true);
                for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += bw.param_grads[i];
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& v : grads) v *= inv;
            nn::adam_step(model.net.mutable_params(), grads, state, hyper);
        }
        out.epoch_losses.push_back(epoch_loss / static_cast<double>(vertebrae.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------

Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    if (values.empty()) return a;
    double sum = 0.0;
    for (double v : values) sum += v;
    a.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return a;
}

std::optional<double> boundary_rms_error(const TpsSurface& surface, const Phantom& ref) {
    const auto& m = ref.vertebra.meta;
    double ss = 0.0;
    std::size_t count = 0;
    for (int k = 0; k < m.shape[2]; ++k) {
        for (int i = 0; i < m.shape[0]; ++i) {
            bool has_body = false, has_post = false;
            for (int j = 0; j < m.shape[1] && !(has_body && has_post); ++j) {
                const auto v = m.index(i, j, k);
                has_body |= ref.body.data[v] != 0;
                has_post |= ref.posterior.data[v] != 0;
            }
            if (!(has_body && has_post)) continue;
            const double x = m.world(0, i), z = m.world(2, k);
            const double e = surface({x, z}) - ref.true_boundary(x, z);
            ss += e * e;
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return std::sqrt(ss / static_cast<double>(count));
}

MetricsReport evaluate(const std::vector<PartitionResult>& results, const std::vector<Phantom>& refs,
                       const std::vector<std::string>& names) {
    if (results.size() != refs.size()) throw std::invalid_argument("evaluate: result and reference counts differ");
    if (!names.empty() && names.size() != refs.size()) throw std::invalid_argument("evaluate: name count mismatch");
    MetricsReport rep;
    std::vector<double> dices, hds, rms;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& res = results[i];
        const auto& ref = refs[i];
        InstanceMetrics im;
        im.name = names.empty() ? "instance_" + std::to_string(i) : names[i];
        im.label = ref.label;
        im.dice = dice(res.body_hard, ref.body);
        if (res.body_hard.empty()) {
            // Worst case: the volume diagonal.
            const auto& m = ref.body.meta;
            double d2 = 0.0;
            for (int a = 0; a < 3; ++a) d2 += std::pow((m.shape[a] - 1) * m.spacing[a], 2);
            im.hausdorff_mm = std::sqrt(d2);
        } else {
            im.hausdorff_mm = hausdorff_mm(res.body_hard, ref.body);
        }
        if (res.surface.grid.valid()) im.rms_height_mm = boundary_rms_error(res.surface, ref);
        dices.push_back(im.dice);
        hds.push_back(im.hausdorff_mm);
        if (im.rms_height_mm) rms.push_back(*im.rms_height_mm);
        rep.instances.push_back(std::move(im));
    }
    rep.dice = aggregate(dices);
    rep.hausdorff_mm = aggregate(hds);
    if (!rms.empty() && rms.size() == rep.instances.size()) rep.rms_height_mm = aggregate(rms);
    return rep;
}

namespace {

nlohmann::json agg_json(const Aggregate& a) { return {{"mean", a.mean}, {"std", a.std}}; }
Aggregate agg_from(const nlohmann::json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

void recompute(MetricsReport& r) {
    std::vector<double> d, h, rms;
    for (const auto& im : r.instances) {
        d.push_back(im.dice);
        h.push_back(im.hausdorff_mm);
        if (im.rms_height_mm) rms.push_back(*im.rms_height_mm);
    }
    r.dice = aggregate(d);
    r.hausdorff_mm = aggregate(h);
    r.rms_height_mm.reset();
    if (!rms.empty() && rms.size() == r.instances.size()) r.rms_height_mm = aggregate(rms);
}

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw std::invalid_argument("report csv: bad number '" + s + "'");
    }
    return v;
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& im : r.instances) {
        nlohmann::json j = {{"name", im.name}, {"label", im.label}, {"dice", im.dice}, {"hausdorff_mm", im.hausdorff_mm}};
        j["rms_height_mm"] = im.rms_height_mm ? nlohmann::json(*im.rms_height_mm) : nlohmann::json(nullptr);
        inst.push_back(j);
    }
    nlohmann::json agg = {{"dice", agg_json(r.dice)}, {"hausdorff_mm", agg_json(r.hausdorff_mm)}};
    agg["rms_height_mm"] = r.rms_height_mm ? agg_json(*r.rms_height_mm) : nlohmann::json(nullptr);
    nlohmann::json doc = {{"count", r.instances.size()}, {"aggregate", agg}, {"instances", inst}};
    if (!r.config.is_null()) doc["config"] = r.config;
    return doc;
}

MetricsReport report_from_json(const nlohmann::json& doc) {
    MetricsReport r;
    for (const auto& j : doc.at("instances")) {
        InstanceMetrics im;
        im.name = j.at("name");
        im.label = j.at("label");
        im.dice = j.at("dice");
        im.hausdorff_mm = j.at("hausdorff_mm");
        if (j.contains("rms_height_mm") && !j.at("rms_height_mm").is_null()) im.rms_height_mm = j.at("rms_height_mm");
        r.instances.push_back(std::move(im));
    }
    const auto& agg = doc.at("aggregate");
    r.dice = agg_from(agg.at("dice"));
    r.hausdorff_mm = agg_from(agg.at("hausdorff_mm"));
    if (agg.contains("rms_height_mm") && !agg.at("rms_height_mm").is_null()) {
        r.rms_height_mm = agg_from(agg.at("rms_height_mm"));
    }
    if (doc.contains("config")) r.config = doc.at("config");
    return r;
}

std::string report_to_csv(const MetricsReport& r) {
    std::string out = "name,label,dice,hausdorff_mm,rms_height_mm\n";
    for (const auto& im : r.instances) {
        out += im.name + "," + im.label + "," + fmt_double(im.dice) + "," + fmt_double(im.hausdorff_mm) + "," +
               (im.rms_height_mm ? fmt_double(*im.rms_height_mm) : std::string()) + "\n";
    }
    return out;
}

MetricsReport report_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "name,label,dice,hausdorff_mm,rms_height_mm") {
        throw std::invalid_argument("report csv: unexpected header");
    }
    MetricsReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            cells.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cells.size() != 5) throw std::invalid_argument("report csv: expected 5 columns");
        InstanceMetrics im;
        im.name = cells[0];
        im.label = cells[1];
        im.dice = parse_double(cells[2]);
        im.hausdorff_mm = parse_double(cells[3]);
        if (!cells[4].empty()) im.rms_height_mm = parse_double(cells[4]);
        r.instances.push_back(std::move(im));
    }
    recompute(r);
    return r;
}

}  // namespace tpsplit
