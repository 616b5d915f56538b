#include "tpsplit/nn.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "tpsplit/io.hpp"
#include "tpsplit/phantom.hpp"

namespace tpsplit::nn {

std::size_t element_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw std::invalid_argument("tensor dimensions must be >= 1");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(element_count(shape), fill) {}

namespace {

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

std::size_t layer_param_count(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::dense: return static_cast<std::size_t>(l.in) * l.out + l.out;
        case LayerKind::conv3d:
            return static_cast<std::size_t>(l.out) * l.in * l.kernel * l.kernel * l.kernel + l.out;
        default: return 0;
    }
}

}  // namespace

std::string layer_name(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::dense: return "dense(" + std::to_string(l.in) + "," + std::to_string(l.out) + ")";
        case LayerKind::conv3d:
            return "conv3d(" + std::to_string(l.in) + "," + std::to_string(l.out) + ",k" + std::to_string(l.kernel) +
                   ",s" + std::to_string(l.stride) + ")";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::flatten: return "flatten";
        case LayerKind::reshape: return "reshape" + shape_str(l.shape);
    }
    return "?";
}

std::vector<std::vector<int>> infer_shapes(const NetworkSpec& spec) {
    std::vector<std::vector<int>> shapes{spec.input_shape};
    element_count(spec.input_shape);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto& in = shapes.back();
        auto fail = [&](const std::string& why) {
            throw std::invalid_argument("layer " + std::to_string(i) + " " + layer_name(l) + ": " + why +
                                        " (input " + shape_str(in) + ")");
        };
        switch (l.kind) {
            case LayerKind::dense:
                if (l.in < 1 || l.out < 1) fail("sizes must be positive");
                if (in.size() != 1 || in[0] != l.in) fail("expects a flat input of " + std::to_string(l.in));
                shapes.push_back({l.out});
                break;
            case LayerKind::conv3d: {
                if (l.in < 1 || l.out < 1 || l.kernel < 1 || l.stride < 1) fail("sizes must be positive");
                if (in.size() != 4 || in[0] != l.in) fail("expects (channels, z, y, x) with matching channels");
                std::vector<int> out{l.out, 0, 0, 0};
                for (int a = 1; a < 4; ++a) {
                    if (in[a] < l.kernel) fail("kernel larger than input");
                    out[a] = (in[a] - l.kernel) / l.stride + 1;
                }
                shapes.push_back(out);
                break;
            }
            case LayerKind::relu:
            case LayerKind::sigmoid: shapes.push_back(in); break;
            case LayerKind::flatten: shapes.push_back({static_cast<int>(element_count(in))}); break;
            case LayerKind::reshape:
                if (element_count(l.shape) != element_count(in)) fail("reshape changes the element count");
                shapes.push_back(l.shape);
                break;
        }
    }
    return shapes;
}

nlohmann::json spec_to_json(const NetworkSpec& spec) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : spec.layers) {
        nlohmann::json j;
        switch (l.kind) {
            case LayerKind::dense: j = {{"type", "dense"}, {"in", l.in}, {"out", l.out}}; break;
            case LayerKind::conv3d:
                j = {{"type", "conv3d"}, {"in", l.in}, {"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride}};
                break;
            case LayerKind::relu: j = {{"type", "relu"}}; break;
            case LayerKind::sigmoid: j = {{"type", "sigmoid"}}; break;
            case LayerKind::flatten: j = {{"type", "flatten"}}; break;
            case LayerKind::reshape: j = {{"type", "reshape"}, {"shape", l.shape}}; break;
        }
        layers.push_back(j);
    }
    return {{"input_shape", spec.input_shape}, {"init_seed", spec.init_seed}, {"layers", layers}};
}

NetworkSpec spec_from_json(const nlohmann::json& doc) {
    NetworkSpec spec;
    doc.at("input_shape").get_to(spec.input_shape);
    spec.init_seed = doc.value("init_seed", std::uint64_t{0});
    for (const auto& j : doc.at("layers")) {
        const auto type = j.at("type").get<std::string>();
        if (type == "dense") {
            spec.layers.push_back(LayerSpec::dense(j.at("in"), j.at("out")));
        } else if (type == "conv3d") {
            spec.layers.push_back(LayerSpec::conv3d(j.at("in"), j.at("out"), j.at("kernel"), j.at("stride")));
        } else if (type == "relu") {
            spec.layers.push_back(LayerSpec::relu());
        } else if (type == "sigmoid") {
            spec.layers.push_back(LayerSpec::sigmoid());
        } else if (type == "flatten") {
            spec.layers.push_back(LayerSpec::flatten());
        } else if (type == "reshape") {
            spec.layers.push_back(LayerSpec::reshape(j.at("shape").get<std::vector<int>>()));
        } else {
            throw std::invalid_argument("unknown layer type '" + type + "'");
        }
    }
    infer_shapes(spec);
    return spec;
}

void Network::layout() {
    shapes_ = infer_shapes(spec_);
    offsets_.clear();
    std::size_t total = 0;
    for (const auto& l : spec_.layers) {
        offsets_.push_back(total);
        total += layer_param_count(l);
    }
    offsets_.push_back(total);
}

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
    layout();
    params_.assign(offsets_.back(), 0.0);
    Rng rng(spec_.init_seed);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const auto& l = spec_.layers[i];
        std::size_t fan_in = 0, fan_out = 0, weights = 0;
        if (l.kind == LayerKind::dense) {
            fan_in = static_cast<std::size_t>(l.in);
            fan_out = static_cast<std::size_t>(l.out);
            weights = fan_in * fan_out;
        } else if (l.kind == LayerKind::conv3d) {
            const std::size_t k3 = static_cast<std::size_t>(l.kernel) * l.kernel * l.kernel;
            fan_in = l.in * k3;
            fan_out = l.out * k3;
            weights = static_cast<std::size_t>(l.out) * fan_in;
        } else {
            continue;
        }
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t w = 0; w < weights; ++w) {
            params_[offsets_[i] + w] = rng.uniform(-limit, limit);
        }
    }
}

Network::Network(NetworkSpec spec, std::vector<double> params) : spec_(std::move(spec)), params_(std::move(params)) {
    layout();
    if (params_.size() != offsets_.back()) {
        throw std::invalid_argument("network: expected " + std::to_string(offsets_.back()) + " parameters, got " +
                                    std::to_string(params_.size()));
    }
}

std::string Network::checksum() const {
    return crc32_hex(std::string_view(reinterpret_cast<const char*>(params_.data()), params_.size() * sizeof(double)));
}

namespace {

struct ConvGeom {
    int c, d, h, w;      // input
    int o, od, oh, ow;   // output
    int k, s;
};

ConvGeom conv_geom(const LayerSpec& l, const std::vector<int>& in, const std::vector<int>& out) {
    return {in[0], in[1], in[2], in[3], out[0], out[1], out[2], out[3], l.kernel, l.stride};
}

void conv_forward(const ConvGeom& g, const double* W, const double* b, const double* in, double* out) {
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    const std::size_t in_vol = in_plane * g.d;
    const std::size_t out_vol = static_cast<std::size_t>(g.od) * g.oh * g.ow;
    const std::size_t k3 = static_cast<std::size_t>(g.k) * g.k * g.k;
    for (int o = 0; o < g.o; ++o) {
        double* op = out + o * out_vol;
        std::fill(op, op + out_vol, b[o]);
        for (int c = 0; c < g.c; ++c) {
            const double* ip = in + c * in_vol;
            const double* wk = W + (static_cast<std::size_t>(o) * g.c + c) * k3;
            for (int kz = 0; kz < g.k; ++kz)
                for (int ky = 0; ky < g.k; ++ky)
                    for (int kx = 0; kx < g.k; ++kx) {
                        const double wv = *wk++;
                        for (int z = 0; z < g.od; ++z) {
                            const double* iz = ip + static_cast<std::size_t>(z * g.s + kz) * in_plane;
                            for (int y = 0; y < g.oh; ++y) {
                                const double* row = iz + static_cast<std::size_t>(y * g.s + ky) * g.w + kx;
                                double* orow = op + (static_cast<std::size_t>(z) * g.oh + y) * g.ow;
                                for (int x = 0; x < g.ow; ++x) orow[x] += wv * row[x * g.s];
                            }
                        }
                    }
        }
    }
}

void conv_backward(const ConvGeom& g, const double* W, const double* in, const double* gout, double* gin,
                   double* gW, double* gb) {
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    const std::size_t in_vol = in_plane * g.d;
    const std::size_t out_vol = static_cast<std::size_t>(g.od) * g.oh * g.ow;
    const std::size_t k3 = static_cast<std::size_t>(g.k) * g.k * g.k;
    for (int o = 0; o < g.o; ++o) {
        const double* gp = gout + o * out_vol;
        if (gb) {
            double sum = 0.0;
            for (std::size_t i = 0; i < out_vol; ++i) sum += gp[i];
            gb[o] += sum;
        }
        for (int c = 0; c < g.c; ++c) {
            const double* ip = in + c * in_vol;
            double* gip = gin + c * in_vol;
            const std::size_t wbase = (static_cast<std::size_t>(o) * g.c + c) * k3;
            std::size_t widx = wbase;
            for (int kz = 0; kz < g.k; ++kz)
                for (int ky = 0; ky < g.k; ++ky)
                    for (int kx = 0; kx < g.k; ++kx, ++widx) {
                        const double wv = W[widx];
                        double acc = 0.0;
                        for (int z = 0; z < g.od; ++z) {
                            const std::size_t zoff = static_cast<std::size_t>(z * g.s + kz) * in_plane;
                            for (int y = 0; y < g.oh; ++y) {
                                const std::size_t roff = zoff + static_cast<std::size_t>(y * g.s + ky) * g.w + kx;
                                const double* grow = gp + (static_cast<std::size_t>(z) * g.oh + y) * g.ow;
                                double* girow = gip + roff;
                                if (gW) {
                                    const double* row = ip + roff;
                                    for (int x = 0; x < g.ow; ++x) {
                                        girow[x * g.s] += wv * grow[x];
                                        acc += grow[x] * row[x * g.s];
                                    }
                                } else {
                                    for (int x = 0; x < g.ow; ++x) girow[x * g.s] += wv * grow[x];
                                }
                            }
                        }
                        if (gW) gW[widx] += acc;
                    }
        }
    }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor run_layer(const Network& net, std::size_t i, const Tensor& x) {
    const auto& l = net.spec().layers[i];
    Tensor y(net.layer_output_shape(i));
    const double* p = net.params().data() + net.param_offset(i);
    switch (l.kind) {
        case LayerKind::dense: {
            Eigen::Map<const RowMat> W(p, l.out, l.in);
            Eigen::Map<const Eigen::VectorXd> b(p + static_cast<std::size_t>(l.in) * l.out, l.out);
            Eigen::Map<const Eigen::VectorXd> xv(x.data.data(), l.in);
            Eigen::Map<Eigen::VectorXd>(y.data.data(), l.out).noalias() = W * xv + b;
            break;
        }
        case LayerKind::conv3d: {
            const auto g = conv_geom(l, x.shape, y.shape);
            const std::size_t nw = static_cast<std::size_t>(g.o) * g.c * g.k * g.k * g.k;
            conv_forward(g, p, p + nw, x.data.data(), y.data.data());
            break;
        }
        case LayerKind::relu:
            for (std::size_t k = 0; k < y.size(); ++k) y.data[k] = x.data[k] > 0.0 ? x.data[k] : 0.0;
            break;
        case LayerKind::sigmoid:
            for (std::size_t k = 0; k < y.size(); ++k) y.data[k] = sigmoid(x.data[k]);
            break;
        case LayerKind::flatten:
        case LayerKind::reshape: y.data = x.data; break;
    }
    for (double v : y.data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error("non-finite value after layer " + std::to_string(i) + " " + layer_name(l));
        }
    }
    return y;
}

void check_input(const Network& net, const Tensor& input) {
    if (input.shape != net.input_shape()) {
        throw std::invalid_argument("network input shape " + shape_str(input.shape) + " does not match " +
                                    shape_str(net.input_shape()));
    }
    if (input.data.size() != element_count(input.shape)) {
        throw std::invalid_argument("tensor data length does not match its shape");
    }
}

}  // namespace

ForwardResult forward(const Network& net, const Tensor& input) {
    check_input(net, input);
    ForwardResult r;
    r.tape.network = &net;
    r.tape.generation = net.generation();
    r.tape.inputs.reserve(net.spec().layers.size());
    Tensor cur = input;
    for (std::size_t i = 0; i < net.spec().layers.size(); ++i) {
        Tensor next = run_layer(net, i, cur);
        r.tape.inputs.push_back(std::move(cur));
        cur = std::move(next);
    }
    r.output = std::move(cur);
    return r;
}

Tensor predict(const Network& net, const Tensor& input) {
    check_input(net, input);
    Tensor cur = input;
    for (std::size_t i = 0; i < net.spec().layers.size(); ++i) {
        cur = run_layer(net, i, cur);
    }
    return cur;
}

Gradients backward(const Network& net, const Tape& tape, const Tensor& output_grad, bool with_params) {
    if (tape.network != &net || tape.generation != net.generation() ||
        tape.inputs.size() != net.spec().layers.size()) {
        throw std::logic_error("backward: tape does not belong to the current network state");
    }
    if (output_grad.shape != net.output_shape()) {
        throw std::invalid_argument("backward: output gradient shape " + shape_str(output_grad.shape) +
                                    " does not match " + shape_str(net.output_shape()));
    }
    Gradients out;
    if (with_params) out.param_grads.assign(net.param_count(), 0.0);

    Tensor g = output_grad;
    for (std::size_t li = net.spec().layers.size(); li-- > 0;) {
        const auto& l = net.spec().layers[li];
        const Tensor& x = tape.inputs[li];
        const double* p = net.params().data() + net.param_offset(li);
        double* gp = with_params ? out.param_grads.data() + net.param_offset(li) : nullptr;
        Tensor gx(x.shape);
        switch (l.kind) {
            case LayerKind::dense: {
                Eigen::Map<const RowMat> W(p, l.out, l.in);
                Eigen::Map<const Eigen::VectorXd> gv(g.data.data(), l.out);
                Eigen::Map<Eigen::VectorXd>(gx.data.data(), l.in).noalias() = W.transpose() * gv;
                if (gp) {
                    Eigen::Map<const Eigen::VectorXd> xv(x.data.data(), l.in);
                    Eigen::Map<RowMat>(gp, l.out, l.in).noalias() += gv * xv.transpose();
                    Eigen::Map<Eigen::VectorXd>(gp + static_cast<std::size_t>(l.in) * l.out, l.out) += gv;
                }
                break;
            }
            case LayerKind::conv3d: {
                const auto geo = conv_geom(l, x.shape, g.shape);
                const std::size_t nw = static_cast<std::size_t>(geo.o) * geo.c * geo.k * geo.k * geo.k;
                conv_backward(geo, p, x.data.data(), g.data.data(), gx.data.data(), gp, gp ? gp + nw : nullptr);
                break;
            }
            case LayerKind::relu:
                for (std::size_t k = 0; k < gx.size(); ++k) gx.data[k] = x.data[k] > 0.0 ? g.data[k] : 0.0;
                break;
            case LayerKind::sigmoid:
                for (std::size_t k = 0; k < gx.size(); ++k) {
                    const double s = sigmoid(x.data[k]);
                    gx.data[k] = g.data[k] * s * (1.0 - s);
                }
                break;
            case LayerKind::flatten:
            case LayerKind::reshape: gx.data = g.data; break;
        }
        g = std::move(gx);
    }
    out.input_grad = std::move(g);
    return out;
}

LossGrad mse(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape || a.data.size() != b.data.size()) {
        throw std::invalid_argument("mse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    LossGrad r;
    r.grad = Tensor(a.shape);
    const double n = static_cast<double>(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sum += d * d;
        r.grad.data[i] = 2.0 * d / n;
    }
    r.loss = sum / n;
    return r;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& h) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: parameter and gradient sizes differ");
    }
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state size mismatch");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

std::string ShapeModel::checksum() const { return crc32_hex(encoder.checksum() + decoder.checksum()); }

ShapeModel make_shape_model(int side, int bottleneck, int hidden, std::uint64_t seed, int input_factor) {
    NetworkSpec enc;
    enc.input_shape = {1, side, side, side};
    enc.init_seed = mix_seed(seed, 1);
    enc.layers = {LayerSpec::conv3d(1, 8, 4, 2), LayerSpec::relu(), LayerSpec::conv3d(8, 16, 4, 2), LayerSpec::relu(),
                  LayerSpec::flatten()};
    const auto shapes = infer_shapes(enc);
    const int flat = shapes.back()[0];
    enc.layers.push_back(LayerSpec::dense(flat, bottleneck));

    NetworkSpec dec;
    dec.input_shape = {bottleneck};
    dec.init_seed = mix_seed(seed, 2);
    dec.layers = {LayerSpec::dense(bottleneck, hidden), LayerSpec::relu(), LayerSpec::dense(hidden, side * side * side),
                  LayerSpec::sigmoid(), LayerSpec::reshape({1, side, side, side})};

    ShapeModel m;
    m.encoder = Network(enc);
    m.decoder = Network(dec);
    m.input_factor = input_factor;
    return m;
}

Tensor reconstruct(const ShapeModel& model, const Tensor& x) {
    return predict(model.decoder, predict(model.encoder, x));
}

LossGrad reconstruction_loss(const ShapeModel& model, const Tensor& x) {
    const auto fe = forward(model.encoder, x);
    const auto fd = forward(model.decoder, fe.output);
    LossGrad r = mse(fd.output, x);
    const auto gd = backward(model.decoder, fd.tape, r.grad, false);
    const auto ge = backward(model.encoder, fe.tape, gd.input_grad, false);
    // x enters both through the network and as the target.
    Tensor gx = ge.input_grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] -= r.grad.data[i];
    r.grad = std::move(gx);
    return r;
}

ReconstructionParamGrads reconstruction_param_grads(const ShapeModel& model, const Tensor& x) {
    if (model.frozen) {
        throw std::logic_error("shape model is frozen");
    }
    const auto fe = forward(model.encoder, x);
    const auto fd = forward(model.decoder, fe.output);
    const LossGrad l = mse(fd.output, x);
    auto gd = backward(model.decoder, fd.tape, l.grad, true);
    auto ge = backward(model.encoder, fe.tape, gd.input_grad, true);
    return {l.loss, std::move(ge.param_grads), std::move(gd.param_grads)};
}

RegressorModel make_regressor(int side, const ControlGrid& grid, double reference_mm, std::uint64_t seed,
                              int input_factor, double output_scale_mm) {
    if (side % input_factor != 0) {
        throw std::invalid_argument("make_regressor: input factor must divide the volume side");
    }
    const int s = side / input_factor;
    NetworkSpec spec;
    spec.input_shape = {1, s, s, s};
    spec.init_seed = mix_seed(seed, 3);
    spec.layers = {LayerSpec::conv3d(1, 8, 4, 2), LayerSpec::relu(), LayerSpec::conv3d(8, 16, 3, 2), LayerSpec::relu(),
                   LayerSpec::flatten()};
    const int flat = infer_shapes(spec).back()[0];
    const int n = static_cast<int>(grid.size());
    spec.layers.push_back(LayerSpec::dense(flat, 64));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::dense(64, n));

    RegressorModel r;
    r.net = Network(spec);
    // Start from the flat reference surface.
    auto& p = r.net.mutable_params();
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(r.net.param_offset(spec.layers.size() - 1)), p.end(), 0.0);
    r.input_factor = input_factor;
    r.reference_mm = reference_mm;
    r.output_scale_mm = output_scale_mm;
    r.nx = grid.nx();
    r.nz = grid.nz();
    return r;
}

Tensor field_to_tensor(const ScalarField& field) {
    const auto& s = field.meta.shape;
    Tensor t;
    t.shape = {1, s[2], s[1], s[0]};
    t.data = field.data;
    return t;
}

ScalarField tensor_to_field(const Tensor& t, const GridMeta& meta) {
    if (t.size() != meta.voxel_count()) {
        throw std::invalid_argument("tensor_to_field: element count mismatch");
    }
    ScalarField f(meta);
    f.data = t.data;
    return f;
}

namespace {

std::string encode_params(const std::vector<double>& a, const std::vector<double>& b = {}) {
    std::vector<float> values;
    values.reserve(a.size() + b.size());
    values.insert(values.end(), a.begin(), a.end());
    values.insert(values.end(), b.begin(), b.end());
    return encode_f32_le(values);
}

std::filesystem::path suffixed(const std::filesystem::path& stem, const char* suffix) {
    auto p = stem;
    p += suffix;
    return p;
}

std::vector<double> load_payload(const std::filesystem::path& stem, const nlohmann::json& doc) {
    const auto bin = stem.parent_path() / doc.at("param_file").get<std::string>();
    const std::string bytes = read_text_file(bin);
    if (crc32_hex(bytes) != doc.at("checksum").get<std::string>()) {
        throw std::runtime_error(bin.string() + ": parameter checksum mismatch");
    }
    const auto f = decode_f32_le(bytes);
    return {f.begin(), f.end()};
}

}  // namespace

void save_shape_model(const std::filesystem::path& stem, const ShapeModel& model) {
    const std::string payload = encode_params(model.encoder.params(), model.decoder.params());
    const auto bin = suffixed(stem, ".bin");
    nlohmann::json doc = {
        {"kind", "shape_model"},
        {"encoder", spec_to_json(model.encoder.spec())},
        {"decoder", spec_to_json(model.decoder.spec())},
        {"encoder_params", model.encoder.param_count()},
        {"decoder_params", model.decoder.param_count()},
        {"input_factor", model.input_factor},
        {"validation_loss", model.validation_loss},
        {"frozen", model.frozen},
        {"param_file", bin.filename().string()},
        {"dtype", "f32"},
        {"byte_order", "little"},
        {"checksum", crc32_hex(payload)},
    };
    write_file_atomic(bin, payload);
    write_file_atomic(suffixed(stem, ".json"), doc.dump(2) + "\n");
}

ShapeModel load_shape_model(const std::filesystem::path& stem) {
    const auto doc = nlohmann::json::parse(read_text_file(suffixed(stem, ".json")));
    if (doc.value("kind", "") != "shape_model") {
        throw std::runtime_error(stem.string() + ": not a shape model");
    }
    auto params = load_payload(stem, doc);
    const auto ne = doc.at("encoder_params").get<std::size_t>();
    if (params.size() != ne + doc.at("decoder_params").get<std::size_t>()) {
        throw std::runtime_error(stem.string() + ": parameter count mismatch");
    }
    ShapeModel m;
    m.encoder = Network(spec_from_json(doc.at("encoder")),
                        std::vector<double>(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(ne)));
    m.decoder = Network(spec_from_json(doc.at("decoder")),
                        std::vector<double>(params.begin() + static_cast<std::ptrdiff_t>(ne), params.end()));
    m.input_factor = doc.at("input_factor");
    m.validation_loss = doc.at("validation_loss");
    m.frozen = doc.at("frozen");
    return m;
}

void save_regressor(const std::filesystem::path& stem, const RegressorModel& model) {
    const std::string payload = encode_params(model.net.params());
    const auto bin = suffixed(stem, ".bin");
    nlohmann::json doc = {
        {"kind", "regressor"},
        {"net", spec_to_json(model.net.spec())},
        {"input_factor", model.input_factor},
        {"reference_mm", model.reference_mm},
        {"output_scale_mm", model.output_scale_mm},
        {"nx", model.nx},
        {"nz", model.nz},
        {"param_file", bin.filename().string()},
        {"dtype", "f32"},
        {"byte_order", "little"},
        {"checksum", crc32_hex(payload)},
    };
    write_file_atomic(bin, payload);
    write_file_atomic(suffixed(stem, ".json"), doc.dump(2) + "\n");
}

RegressorModel load_regressor(const std::filesystem::path& stem) {
    const auto doc = nlohmann::json::parse(read_text_file(suffixed(stem, ".json")));
    if (doc.value("kind", "") != "regressor") {
        throw std::runtime_error(stem.string() + ": not a regressor model");
    }
    RegressorModel r;
    r.net = Network(spec_from_json(doc.at("net")), load_payload(stem, doc));
    r.input_factor = doc.at("input_factor");
    r.reference_mm = doc.at("reference_mm");
    r.output_scale_mm = doc.at("output_scale_mm");
    r.nx = doc.at("nx");
    r.nz = doc.at("nz");
    return r;
}

}  // namespace tpsplit::nn
