#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "config.hpp"

namespace {

using nlohmann::json;

int emit_error(const std::string& kind, const std::string& message, const json& details = json::array()) {
    json e = {{"error", {{"type", kind}, {"message", message}}}};
    if (!details.empty()) e["error"]["details"] = details;
    std::cout << e.dump(2) << std::endl;
    return kind == "config" || kind == "usage" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fovea stacking: phase plate design, simulation, fusion, control and calibration"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all subcommand help");

    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;

    std::map<CLI::App*, std::string> names;
    const auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& full, const std::string& help) {
        CLI::App* sub = parent->add_subcommand(name, help);
        sub->add_option("-c,--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the config seed");
        sub->add_option("-o,--out", out, "Override the output directory");
        sub->add_option("--threads", threads, "Worker threads (overrides FOVEA_THREADS)")->check(CLI::PositiveNumber);
        names[sub] = full;
    };

    leaf(&app, "optimize-single", "optimize-single", "Optimize one pattern for a single field point");
    leaf(&app, "optimize-joint", "optimize-joint", "Jointly optimize a fovea stack over a field grid");
    leaf(&app, "optimize-tiling", "optimize-tiling", "ROI tiling baseline: k x k independent foveas");
    auto* analyze = app.add_subcommand("analyze", "Optical analysis")->require_subcommand(1);
    leaf(analyze, "mtf", "analyze mtf", "PSF-derived MTF and MTF50 at field points");
    leaf(analyze, "coverage", "analyze coverage", "Fovea coverage maps and images needed");
    leaf(analyze, "budget-curve", "analyze budget-curve", "Mean r_min against stack size");
    leaf(&app, "render-stack", "render-stack", "Simulate the captures of a fovea stack");
    auto* fuse = app.add_subcommand("fuse", "Fuse a fovea stack")->require_subcommand(1);
    leaf(fuse, "sharpness", "fuse sharpness", "Sharpness-weighted fusion");
    leaf(fuse, "mask", "fuse mask", "Fusion from the optimizer's index mask");
    leaf(fuse, "pyramid", "fuse pyramid", "Laplacian pyramid fusion");
    auto* device = app.add_subcommand("device", "Synthetic phase plate device and control models")->require_subcommand(1);
    leaf(device, "generate", "device generate", "Generate a voltage / wavefront dataset");
    leaf(device, "fit-linear", "device fit-linear", "Fit the linear influence model");
    leaf(device, "train", "device train", "Train linear, decoder and encoder models");
    leaf(device, "control", "device control", "Voltages for a target wavefront");
    leaf(device, "compare-strategies", "device compare-strategies", "Compare the four control strategies");
    leaf(&app, "calibrate", "calibrate", "Assembly calibration from synthetic captures");
    leaf(&app, "track-sim", "track-sim", "Grid-interpolated control along a scripted path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return emit_error("usage", e.what());
    }

    std::string command;
    for (const auto& [sub, name] : names)
        if (sub->parsed()) command = name;

    try {
        auto rc = fovea::cli::load_run_config(config, seed, out, threads);
        fovea::cli::run_command(command, rc);
        std::cout << json{{"status", "ok"}, {"command", command}, {"out", rc.out_dir.string()}}.dump() << std::endl;
        return 0;
    } catch (const fovea::cli::ConfigError& e) {
        json details = json::array();
        for (const auto& i : e.issues()) details.push_back({{"path", i.path.empty() ? "/" : i.path}, {"message", i.message}});
        return emit_error("config", e.what(), details);
    } catch (const fovea::InvalidArgument& e) {
        return emit_error("invalid_argument", e.what());
    } catch (const fovea::IoError& e) {
        return emit_error("io", e.what());
    } catch (const fovea::OptimizationFailed& e) {
        return emit_error("optimization_failed", e.what());
    } catch (const fovea::Error& e) {
        return emit_error("error", e.what());
    } catch (const nlohmann::json::exception& e) {
        return emit_error("json", e.what());
    } catch (const std::exception& e) {
        return emit_error("internal", e.what());
    }
}
