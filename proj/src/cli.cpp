#include "tpsplit/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "tpsplit/fit.hpp"
#include "tpsplit/io.hpp"
#include "tpsplit/phantom.hpp"

namespace fs = std::filesystem;

namespace tpsplit {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string indexed(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
    return buf;
}

std::string grid_name(const std::array<int, 2>& g) { return std::to_string(g[0]) + "x" + std::to_string(g[1]); }

// Settings resolved from defaults, then the config file, then flags.
struct Settings {
    std::uint64_t seed = 1;
    PhantomParams phantom;
    PhantomJitter jitter;
    FitConfig fit;
    CaeTrainConfig cae;
    RegressorTrainConfig regressor;
};

nlohmann::json jitter_to_json(const PhantomJitter& j) {
    return {{"size_fraction", j.size_fraction},
            {"offset_mm", j.offset_mm},
            {"tilt_range", j.tilt_range},
            {"curve_range_mm", j.curve_range_mm}};
}

void jitter_from_json(const nlohmann::json& doc, PhantomJitter& j) {
    j.size_fraction = doc.value("size_fraction", j.size_fraction);
    j.offset_mm = doc.value("offset_mm", j.offset_mm);
    if (doc.contains("tilt_range")) doc.at("tilt_range").get_to(j.tilt_range);
    if (doc.contains("curve_range_mm")) doc.at("curve_range_mm").get_to(j.curve_range_mm);
}

nlohmann::json cae_to_json(const CaeTrainConfig& c) {
    return {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
            {"validation_fraction", c.validation_fraction}, {"seed", c.seed}, {"side", c.side},
            {"bottleneck", c.bottleneck}, {"hidden", c.hidden}};
}

void cae_from_json(const nlohmann::json& doc, CaeTrainConfig& c) {
    c.epochs = doc.value("epochs", c.epochs);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.validation_fraction = doc.value("validation_fraction", c.validation_fraction);
    c.side = doc.value("side", c.side);
    c.bottleneck = doc.value("bottleneck", c.bottleneck);
    c.hidden = doc.value("hidden", c.hidden);
}

nlohmann::json regressor_to_json(const RegressorTrainConfig& r) {
    return {{"epochs", r.epochs},         {"batch_size", r.batch_size},     {"learning_rate", r.learning_rate},
            {"seed", r.seed},             {"input_factor", r.input_factor}, {"output_scale_mm", r.output_scale_mm}};
}

void regressor_from_json(const nlohmann::json& doc, RegressorTrainConfig& r) {
    r.epochs = doc.value("epochs", r.epochs);
    r.batch_size = doc.value("batch_size", r.batch_size);
    r.learning_rate = doc.value("learning_rate", r.learning_rate);
    r.input_factor = doc.value("input_factor", r.input_factor);
    r.output_scale_mm = doc.value("output_scale_mm", r.output_scale_mm);
}

nlohmann::json settings_to_json(const Settings& s) {
    return {{"seed", s.seed},
            {"phantom", params_to_json(s.phantom)},
            {"jitter", jitter_to_json(s.jitter)},
            {"fit", fit_config_to_json(s.fit)},
            {"cae", cae_to_json(s.cae)},
            {"regressor", regressor_to_json(s.regressor)}};
}

// Flags shared by every sub-command.
struct CommonFlags {
    std::string config;
    std::string out;
    std::uint64_t seed = 1;
    std::vector<std::string> grids;
    double tau = 0.0;
    int iters = 0;
    double threshold = 0.0;
    std::string axis;
    bool flip = false;

    CLI::Option* seed_opt = nullptr;
    CLI::Option* grid_opt = nullptr;
    CLI::Option* tau_opt = nullptr;
    CLI::Option* iters_opt = nullptr;
    CLI::Option* threshold_opt = nullptr;
    CLI::Option* axis_opt = nullptr;
    CLI::Option* flip_opt = nullptr;

    void attach(CLI::App* app, bool out_required = true) {
        app->add_option("--config", config, "Experiment config JSON")->check(CLI::ExistingFile);
        auto* o = app->add_option("--out", out, "Output directory");
        if (out_required) o->required();
        seed_opt = app->add_option("--seed", seed, "Root seed for all randomness");
        grid_opt = app->add_option("--grid", grids, "Control grid <nx>x<nz> (repeatable)")->delimiter(',');
        tau_opt = app->add_option("--tau", tau, "Sigmoid temperature in mm");
        iters_opt = app->add_option("--iters", iters, "Optimizer iterations");
        threshold_opt = app->add_option("--threshold", threshold, "Hard-mask threshold");
        axis_opt = app->add_option("--axis", axis, "Height axis x|y|z");
        flip_opt = app->add_flag("--flip", flip, "Body on the positive-distance side");
    }

    Settings resolve() const {
        Settings s;
        if (!config.empty()) {
            nlohmann::json doc;
            try {
                doc = nlohmann::json::parse(read_text_file(config));
            } catch (const nlohmann::json::exception& e) {
                throw UsageError("config " + config + ": " + e.what());
            }
            s.seed = doc.value("seed", s.seed);
            if (doc.contains("phantom")) s.phantom = params_from_json(doc.at("phantom"));
            if (doc.contains("jitter")) jitter_from_json(doc.at("jitter"), s.jitter);
            if (doc.contains("fit")) s.fit = fit_config_from_json(doc.at("fit"));
            if (doc.contains("cae")) cae_from_json(doc.at("cae"), s.cae);
            if (doc.contains("regressor")) regressor_from_json(doc.at("regressor"), s.regressor);
        }
        if (seed_opt->count()) s.seed = seed;
        try {
            if (grid_opt->count()) {
                s.fit.grids.clear();
                for (const auto& g : grids) s.fit.grids.push_back(parse_grid(g));
            }
            if (axis_opt->count()) s.fit.height_axis = parse_axis(axis);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (tau_opt->count()) s.fit.tau_mm = tau;
        if (iters_opt->count()) s.fit.iterations = iters;
        if (threshold_opt->count()) s.fit.threshold = threshold;
        if (flip_opt->count()) s.fit.flip = flip;
        try {
            s.fit.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        s.fit.seed = s.seed;
        s.cae.seed = mix_seed(s.seed, 1);
        s.regressor.seed = mix_seed(s.seed, 2);
        return s;
    }
};

// Records checksums of written files relative to the run directory.
class Artifacts {
public:
    explicit Artifacts(fs::path root) : root_(std::move(root)) {}

    void add(const fs::path& p) {
        if (!fs::is_regular_file(p)) throw std::runtime_error("artifact was not written: " + p.string());
        sums_[fs::relative(p, root_).generic_string()] = file_checksum(p);
    }
    void add_stem(const fs::path& stem, const char* payload) {
        add(fs::path(stem.string() + ".json"));
        add(fs::path(stem.string() + payload));
    }
    void write(const fs::path& p, std::string_view contents) {
        write_file_atomic(p, contents);
        add(p);
    }
    const nlohmann::json& json() const { return sums_; }

private:
    fs::path root_;
    nlohmann::json sums_ = nlohmann::json::object();
};

struct Dataset {
    std::vector<std::string> names;
    std::vector<Phantom> phantoms;
};

Dataset load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("missing data directory: " + dir.string());
    Dataset d;
    for (const auto& p : phantom_dirs(dir)) {
        d.names.push_back(p.filename().string());
        d.phantoms.push_back(load_phantom(p));
    }
    if (d.phantoms.empty()) throw std::runtime_error("no phantom directories under " + dir.string());
    return d;
}

void require_model(const fs::path& stem, const char* what) {
    for (const char* ext : {".json", ".bin"}) {
        const fs::path p(stem.string() + ext);
        if (!fs::is_regular_file(p)) throw std::runtime_error(std::string("missing ") + what + ": " + p.string());
    }
}

std::string trace_csv(const std::vector<std::pair<int, double>>& trace) {
    std::string s = "iteration,loss\n";
    for (const auto& [it, loss] : trace) s += std::to_string(it) + "," + num(loss) + "\n";
    return s;
}

std::string history_csv(const std::vector<double>& losses) {
    std::string s = "epoch,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i) + "," + num(losses[i]) + "\n";
    return s;
}

void write_report(Artifacts& art, const fs::path& dir, const MetricsReport& rep) {
    art.write(dir / "report.json", report_to_json(rep).dump(2) + "\n");
    art.write(dir / "report.csv", report_to_csv(rep));
}

std::string surface_obj(const TpsSurface& s, int axis) {
    std::ostringstream os;
    write_surface_obj(os, s, 64, axis);
    return os.str();
}

// Per-instance direct or supervised fits for one grid.
std::vector<PartitionResult> fit_dataset(const Dataset& data, const ControlGrid& grid, const nn::ShapeModel* cae,
                                         const FitConfig& cfg, std::ostream& out) {
    std::vector<PartitionResult> results;
    results.reserve(data.phantoms.size());
    for (std::size_t i = 0; i < data.phantoms.size(); ++i) {
        const auto& p = data.phantoms[i];
        results.push_back(cae ? fit_heights_direct(p.vertebra, grid, *cae, cfg)
                              : fit_heights_supervised(p.vertebra, p.body, grid, cfg));
        out << "  " << data.names[i] << " dice " << dice(results.back().body_hard, p.body) << "\n";
    }
    return results;
}

nlohmann::json report_config(const Settings& s, const std::array<int, 2>& g, const std::string& mode) {
    auto c = fit_config_to_json(s.fit);
    c.erase("grids");
    c["grid"] = grid_name(g);
    c["mode"] = mode;
    return c;
}

struct RunRecord {
    nlohmann::json timings = nlohmann::json::object();
};

// ---------------------------------------------------------------------------

void cmd_phantom(const Settings& s, int n, const fs::path& out_dir, Artifacts& art, RunRecord& rec, std::ostream& out) {
    if (n < 1) throw UsageError("phantom: --n must be at least 1");
    const auto t0 = Clock::now();
    const auto batch = phantom_batch(n, s.phantom, s.seed, s.jitter);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const fs::path dir = out_dir / indexed("phantom_", i);
        save_phantom(dir, batch[i]);
        for (const char* m : {"vertebra", "body", "posterior"}) art.add_stem(dir / m, ".raw");
        art.add(dir / "params.json");
    }
    rec.timings["generate"] = seconds_since(t0);
    out << "wrote " << batch.size() << " phantoms to " << out_dir.string() << "\n";
}

void cmd_cae_train(const Settings& s, const fs::path& data_dir, const fs::path& out_dir, Artifacts& art,
                   RunRecord& rec, std::ostream& out) {
    auto t0 = Clock::now();
    const auto data = load_dataset(data_dir);
    std::vector<BinaryMask> bodies;
    for (const auto& p : data.phantoms) bodies.push_back(p.body);
    rec.timings["load"] = seconds_since(t0);
    t0 = Clock::now();
    const auto result = pretrain_cae(bodies, s.cae);
    rec.timings["train"] = seconds_since(t0);
    nn::save_shape_model(out_dir / "cae", result.model);
    art.add_stem(out_dir / "cae", ".bin");
    art.write(out_dir / "cae_history.csv", history_csv(result.epoch_losses));
    const nlohmann::json summary = {{"training_masks", bodies.size()},
                                    {"initial_validation_loss", result.initial_validation_loss},
                                    {"validation_loss", result.model.validation_loss},
                                    {"checksum", result.model.checksum()}};
    art.write(out_dir / "cae_summary.json", summary.dump(2) + "\n");
    out << "validation loss " << result.initial_validation_loss << " -> " << result.model.validation_loss << "\n";
}

void cmd_fit(const Settings& s, const fs::path& data_dir, const std::string& cae_stem, bool supervised,
             const fs::path& out_dir, Artifacts& art, RunRecord& rec, std::ostream& out) {
    std::optional<nn::ShapeModel> cae;
    if (!supervised) {
        if (cae_stem.empty()) throw UsageError("fit: --cae is required unless --supervised is given");
        require_model(cae_stem, "shape model");
        cae = nn::load_shape_model(cae_stem);
    }
    const auto data = load_dataset(data_dir);
    const auto dims = s.fit.grids.front();
    const auto grid = grid_for_volume(data.phantoms.front().vertebra.meta, dims, s.fit);
    const auto t0 = Clock::now();
    const auto results = fit_dataset(data, grid, cae ? &*cae : nullptr, s.fit, out);
    rec.timings["fit"] = seconds_since(t0);
    for (std::size_t i = 0; i < results.size(); ++i) {
        const fs::path dir = out_dir / "instances" / data.names[i];
        const auto& r = results[i];
        art.write(dir / "surface.json", surface_to_json(r.surface).dump(2) + "\n");
        art.write(dir / "surface.obj", surface_obj(r.surface, s.fit.height_axis));
        art.write(dir / "trace.csv", trace_csv(r.loss_trace));
        write_mask(dir / "body", r.body_hard);
        art.add_stem(dir / "body", ".raw");
        write_mask(dir / "posterior", r.posterior_hard);
        art.add_stem(dir / "posterior", ".raw");
    }
    auto rep = evaluate(results, data.phantoms, data.names);
    rep.config = report_config(s, dims, supervised ? "supervised" : "direct");
    write_report(art, out_dir, rep);
    out << "dice " << rep.dice.mean << " +- " << rep.dice.std << ", hausdorff " << rep.hausdorff_mm.mean << " +- "
        << rep.hausdorff_mm.std << " mm\n";
}

void cmd_train(const Settings& s, const fs::path& data_dir, const std::string& cae_stem, const fs::path& out_dir,
               Artifacts& art, RunRecord& rec, std::ostream& out) {
    if (cae_stem.empty()) throw UsageError("train: --cae is required");
    require_model(cae_stem, "shape model");
    const auto cae = nn::load_shape_model(cae_stem);
    const auto data = load_dataset(data_dir);
    std::vector<BinaryMask> vertebrae;
    for (const auto& p : data.phantoms) vertebrae.push_back(p.vertebra);
    const auto grid = grid_for_volume(vertebrae.front().meta, s.fit.grids.front(), s.fit);
    const auto t0 = Clock::now();
    const auto result = train_regressor(vertebrae, grid, cae, s.fit, s.regressor);
    rec.timings["train"] = seconds_since(t0);
    nn::save_regressor(out_dir / "regressor", result.model);
    art.add_stem(out_dir / "regressor", ".bin");
    art.write(out_dir / "regressor_history.csv", history_csv(result.epoch_losses));
    out << "loss " << result.epoch_losses.front() << " -> " << result.epoch_losses.back() << "\n";
}

void cmd_eval(const Settings& s, const fs::path& data_dir, const std::string& regressor_stem,
              const std::string& results_dir, const fs::path& out_dir, Artifacts& art, RunRecord& rec,
              std::ostream& out) {
    if (regressor_stem.empty() == results_dir.empty()) {
        throw UsageError("eval: give exactly one of --regressor or --results");
    }
    const auto data = load_dataset(data_dir);
    const auto t0 = Clock::now();
    std::vector<PartitionResult> results;
    nlohmann::json config;
    if (!regressor_stem.empty()) {
        require_model(regressor_stem, "regressor");
        const auto model = nn::load_regressor(regressor_stem);
        const auto grid =
            grid_for_volume(data.phantoms.front().vertebra.meta, {model.nx, model.nz}, s.fit);
        for (const auto& p : data.phantoms) {
            const auto h = regressor_heights(model, p.vertebra);
            const PartitionChain chain(p.vertebra, grid, s.fit);
            results.push_back(partition_with_heights(
                chain, Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size())), s.fit));
        }
        config = report_config(s, {model.nx, model.nz}, "regressor");
    } else {
        std::optional<std::array<int, 2>> dims;
        for (const auto& name : data.names) {
            const fs::path file = fs::path(results_dir) / "instances" / name / "surface.json";
            if (!fs::is_regular_file(file)) throw std::runtime_error("missing surface: " + file.string());
            const auto surface = surface_from_json(nlohmann::json::parse(read_text_file(file)));
            const auto& p = data.phantoms[results.size()];
            const PartitionChain chain(p.vertebra, surface.grid, s.fit);
            results.push_back(partition_with_heights(chain, surface.heights, s.fit));
            dims = std::array<int, 2>{surface.grid.nx(), surface.grid.nz()};
        }
        config = report_config(s, *dims, "surfaces");
    }
    rec.timings["partition"] = seconds_since(t0);
    auto rep = evaluate(results, data.phantoms, data.names);
    rep.config = config;
    write_report(art, out_dir, rep);
    out << "dice " << rep.dice.mean << " +- " << rep.dice.std << ", hausdorff " << rep.hausdorff_mm.mean << " +- "
        << rep.hausdorff_mm.std << " mm\n";
}

void cmd_sweep(const Settings& s, const fs::path& data_dir, const std::string& cae_stem, bool supervised,
               const fs::path& out_dir, Artifacts& art, RunRecord& rec, std::ostream& out) {
    std::optional<nn::ShapeModel> cae;
    if (!supervised) {
        if (cae_stem.empty()) throw UsageError("sweep: --cae is required unless --supervised is given");
        require_model(cae_stem, "shape model");
        cae = nn::load_shape_model(cae_stem);
    }
    const auto data = load_dataset(data_dir);
    std::string table = "grid,control_points,dice_mean,dice_std,hausdorff_mm_mean,hausdorff_mm_std\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& dims : s.fit.grids) {
        const auto name = grid_name(dims);
        out << "grid " << name << "\n";
        const auto grid = grid_for_volume(data.phantoms.front().vertebra.meta, dims, s.fit);
        const auto t0 = Clock::now();
        const auto results = fit_dataset(data, grid, cae ? &*cae : nullptr, s.fit, out);
        rec.timings["fit_" + name] = seconds_since(t0);
        const fs::path dir = out_dir / ("grid_" + name);
        for (std::size_t i = 0; i < results.size(); ++i) {
            art.write(dir / "surfaces" / (data.names[i] + ".json"), surface_to_json(results[i].surface).dump(2) + "\n");
        }
        auto rep = evaluate(results, data.phantoms, data.names);
        rep.config = report_config(s, dims, supervised ? "supervised" : "direct");
        write_report(art, dir, rep);
        const int count = dims[0] * dims[1];
        table += name + "," + std::to_string(count) + "," + num(rep.dice.mean) + "," + num(rep.dice.std) + "," +
                 num(rep.hausdorff_mm.mean) + "," + num(rep.hausdorff_mm.std) + "\n";
        rows.push_back({{"grid", name},
                        {"control_points", count},
                        {"dice", {{"mean", rep.dice.mean}, {"std", rep.dice.std}}},
                        {"hausdorff_mm", {{"mean", rep.hausdorff_mm.mean}, {"std", rep.hausdorff_mm.std}}}});
    }
    art.write(out_dir / "table.csv", table);
    art.write(out_dir / "table.json", nlohmann::json{{"rows", rows}}.dump(2) + "\n");
    out << table;
}

void cmd_export(const Settings& s, const std::string& input, const std::string& format, int res,
                const fs::path& out_dir, Artifacts& art, std::ostream& out) {
    if (format != "obj" && format != "pgm-slices") {
        throw UsageError("export: unknown format '" + format + "' (expected obj or pgm-slices)");
    }
    if (format == "obj") {
        if (res < 1) throw UsageError("export: --res must be positive");
        const auto surface = surface_from_json(nlohmann::json::parse(read_text_file(input)));
        std::ostringstream os;
        write_surface_obj(os, surface, res, s.fit.height_axis);
        art.write(out_dir / "surface.obj", os.str());
        out << "wrote " << (out_dir / "surface.obj").string() << "\n";
        return;
    }
    // A mask or field stem; the sidecar names the payload type.
    fs::path stem(input);
    if (stem.extension() == ".json" || stem.extension() == ".raw") stem.replace_extension();
    const auto sidecar = nlohmann::json::parse(read_text_file(fs::path(stem.string() + ".json")));
    const ScalarField field =
        sidecar.value("dtype", "u8") == "u8" ? to_field(read_mask(stem)) : read_field(stem);
    const int axis = s.fit.height_axis;
    const int count = field.meta.shape[axis];
    for (int i = 0; i < count; ++i) {
        std::ostringstream os;
        write_pgm_slice(os, field, axis, i);
        art.write(out_dir / (indexed("slice_", static_cast<std::size_t>(i)) + ".pgm"), os.str());
    }
    out << "wrote " << count << " slices to " << out_dir.string() << "\n";
}

}  // namespace

std::vector<fs::path> phantom_dirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::is_regular_file(e.path() / "params.json")) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void append_manifest(const fs::path& dir, const nlohmann::json& run) {
    const fs::path file = dir / "manifest.json";
    nlohmann::json doc = {{"runs", nlohmann::json::array()}};
    if (fs::exists(file)) doc = nlohmann::json::parse(read_text_file(file));
    doc["runs"].push_back(run);
    write_file_atomic(file, doc.dump(2) + "\n");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Partition binary voxel masks with a differentiable thin-plate-spline surface", "tpsplit"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    std::map<std::string, CommonFlags> flags;
    auto* phantom = app.add_subcommand("phantom", "Generate a phantom batch");
    auto* cae_train = app.add_subcommand("cae-train", "Pretrain the shape model on body masks");
    auto* fit = app.add_subcommand("fit", "Fit control heights per instance");
    auto* train = app.add_subcommand("train", "Train the height regressor through the shape-model loss");
    auto* sweep = app.add_subcommand("sweep", "Direct fits and reports for every grid size");
    auto* eval = app.add_subcommand("eval", "Evaluate a regressor or saved surfaces");
    auto* exp = app.add_subcommand("export", "Export a surface mesh or mask slices");
    for (auto* sub : {phantom, cae_train, fit, train, sweep, eval, exp}) flags[sub->get_name()].attach(sub);

    int n = 0;
    std::string params_file, data, cae, regressor, results, input, format;
    bool supervised = false;
    int res = 64;
    phantom->add_option("--n", n, "Number of phantoms")->required();
    phantom->add_option("--params", params_file, "Phantom parameter JSON (overrides the config section)");
    for (auto* sub : {cae_train, fit, train, sweep, eval}) {
        sub->add_option("--data", data, "Directory of phantom directories")->required();
    }
    for (auto* sub : {fit, train, sweep}) sub->add_option("--cae", cae, "Shape model stem (without extension)");
    for (auto* sub : {fit, sweep}) sub->add_flag("--supervised", supervised, "Fit against the paired body masks");
    eval->add_option("--regressor", regressor, "Regressor model stem");
    eval->add_option("--results", results, "Output directory of a previous fit run");
    exp->add_option("--input", input, "Surface JSON (obj) or mask stem (pgm-slices)")->required();
    exp->add_option("--format", format, "obj | pgm-slices")->required();
    exp->add_option("--res", res, "OBJ sampling resolution");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        const auto& f = flags.at(command);
        Settings s = f.resolve();
        if (!params_file.empty()) s.phantom = params_from_json(nlohmann::json::parse(read_text_file(params_file)));
        const fs::path out_dir(f.out);
        fs::create_directories(out_dir);
        Artifacts art(out_dir);
        RunRecord rec;
        const auto t0 = Clock::now();
        if (command == "phantom") {
            cmd_phantom(s, n, out_dir, art, rec, out);
        } else if (command == "cae-train") {
            cmd_cae_train(s, data, out_dir, art, rec, out);
        } else if (command == "fit") {
            cmd_fit(s, data, cae, supervised, out_dir, art, rec, out);
        } else if (command == "train") {
            cmd_train(s, data, cae, out_dir, art, rec, out);
        } else if (command == "sweep") {
            cmd_sweep(s, data, cae, supervised, out_dir, art, rec, out);
        } else if (command == "eval") {
            cmd_eval(s, data, regressor, results, out_dir, art, rec, out);
        } else {
            cmd_export(s, input, format, res, out_dir, art, out);
        }
        rec.timings["total"] = seconds_since(t0);
        append_manifest(out_dir, {{"command", command},
                                  {"args", args},
                                  {"version", kToolVersion},
                                  {"config", settings_to_json(s)},
                                  {"seeds",
                                   {{"root", s.seed},
                                    {"phantom_batch", s.seed},
                                    {"cae", s.cae.seed},
                                    {"regressor", s.regressor.seed}}},
                                  {"artifacts", art.json()},
                                  {"timings_s", rec.timings}});
        return 0;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace tpsplit
