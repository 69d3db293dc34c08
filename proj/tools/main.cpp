// qdiff: differential testing of a float-precision classifier against its
// int8-quantized counterpart. Subcommands cover the whole pipeline:
// quantize -> profile -> tune -> run -> decode -> report.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/distort.hpp"
#include "qdiff/errors.hpp"
#include "qdiff/metrics.hpp"
#include "qdiff/model.hpp"
#include "qdiff/patch.hpp"
#include "qdiff/quant.hpp"
#include "qdiff/search.hpp"

namespace fs = std::filesystem;
using namespace qdiff;

namespace {

std::string join_out(const std::string& out_dir, const std::string& name) {
    if (fs::path(name).is_absolute()) return name;
    return (fs::path(out_dir) / name).string();
}

void ensure_out_dir(const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir);
}

std::string audit_csv(const TuneResult& result) {
    std::string csv = "family,halvings,median_psnr_db,converged\n";
    char buf[64];
    for (const auto& row : result.trail) {
        std::snprintf(buf, sizeof buf, "%.6g", row.median_psnr);
        csv += std::string(family_name(row.family)) + "," +
               std::to_string(row.halvings) + "," + buf + "," +
               (row.converged ? "true" : "false") + "\n";
    }
    return csv;
}

void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

int cmd_quantize(const std::string& model_path, const std::string& mode_name,
                 const std::string& calibration_path,
                 const std::string& out_path) {
    ModelSpec model = load_model(model_path);
    QuantMode mode = quant_mode_from_name(mode_name);
    PatchSet calibration;
    const PatchSet* calibration_ptr = nullptr;
    if (!calibration_path.empty()) {
        calibration = read_patchset(calibration_path);
        calibration_ptr = &calibration;
    }
    QuantizedModel quantized = quantize_model(model, mode, calibration_ptr);
    save_quantized_model(quantized, out_path);
    std::printf("quantized %s (%s) -> %s\n", model_path.c_str(),
                quant_mode_name(mode), out_path.c_str());
    return 0;
}

int cmd_profile(const std::string& model_path, const std::string& patches_path,
                std::uint32_t k, const std::string& out_path) {
    ModelSpec model = load_model(model_path);
    PatchSet set = read_patchset(patches_path);
    NeuronIntervals intervals = profile_intervals(model, set, k);
    save_intervals(intervals, out_path);
    std::printf("profiled %zu neurons (k=%u) over %zu patches -> %s\n",
                intervals.neurons.size(), k, set.size(), out_path.c_str());
    return 0;
}

int cmd_tune(const std::string& patches_path, double psnr_threshold,
             std::size_t budget, std::uint64_t seed,
             const std::string& bounds_path, const std::string& audit_path) {
    PatchSet set = read_patchset(patches_path);
    const Patch3D& first = set.patches.front();
    Layout layout = build_layout({first.d1, first.d2, first.d3});
    Rng rng(seed, 777);
    TuneResult result = tune_bounds(layout, DistortionBounds::defaults(layout),
                                    set, psnr_threshold, budget, rng);
    save_bounds(result.bounds, layout, bounds_path);
    write_text(audit_path, audit_csv(result));
    std::printf("tuned bounds for %zu families -> %s (audit %s)\n",
                layout.slots.size(), bounds_path.c_str(), audit_path.c_str());
    return 0;
}

int cmd_run(const std::string& config_path, bool seed_given,
            std::uint64_t seed, std::uint32_t threads,
            const std::string& report_path, const std::string& offload_path) {
    SessionConfig config = load_session_config(config_path);
    if (seed_given) config.rng_seed = seed;
    ModelSpec model = load_model(config.paths.model);
    QuantizedModel qmodel = load_quantized_model(config.paths.quantized);
    PatchSet patches = read_patchset(config.paths.patches);

    NeuronIntervals intervals;
    const NeuronIntervals* intervals_ptr = nullptr;
    if (!config.paths.intervals.empty()) {
        intervals = load_intervals(config.paths.intervals);
        intervals_ptr = &intervals;
    }
    DistortionBounds bounds;
    const DistortionBounds* bounds_ptr = nullptr;
    if (!config.paths.bounds.empty()) {
        const Patch3D& first = patches.patches.front();
        bounds = load_bounds(config.paths.bounds,
                             build_layout({first.d1, first.d2, first.d3}));
        bounds_ptr = &bounds;
    }

    SessionReport report =
        run_session(config, patches, model, qmodel, intervals_ptr, bounds_ptr,
                    offload_path, threads);
    save_report(report, report_path);

    std::uint64_t total_dii = 0;
    for (const SeedRun& s : report.seeds) total_dii += s.dii;
    std::printf("%zu seed run(s), %llu difference-inducing input(s)\n",
                report.seeds.size(),
                static_cast<unsigned long long>(total_dii));
    std::printf("report -> %s\n", report_path.c_str());
    if (total_dii > 0) std::printf("offload -> %s\n", offload_path.c_str());
    if (report.aborted) {
        std::fprintf(stderr, "session aborted: offload I/O failed; report is partial\n");
        return 1;
    }
    return 0;
}

int cmd_decode(const std::string& dii_path, const std::string& patches_path,
               const std::string& bounds_path, const std::string& out_path) {
    std::vector<DiiRecord> records = read_dii_file(dii_path);
    PatchSet set = read_patchset(patches_path);
    const Patch3D& first = set.patches.front();
    Layout layout = build_layout({first.d1, first.d2, first.d3});
    DistortionBounds bounds = bounds_path.empty()
                                  ? DistortionBounds::defaults(layout)
                                  : load_bounds(bounds_path, layout);
    if (records.empty()) {
        std::fprintf(stderr, "warning: %s holds no records; nothing written\n",
                     dii_path.c_str());
        return 0;
    }
    PatchSet decoded;
    decoded.provenance = "decoded from " + fs::path(dii_path).filename().string();
    for (const DiiRecord& rec : records) {
        if (rec.patch_index >= set.size())
            throw FormatError(dii_path + ": record references patch " +
                              std::to_string(rec.patch_index) +
                              " but the set holds " + std::to_string(set.size()));
        Patch3D p = decode(layout, bounds, rec.vector,
                           set.patches[rec.patch_index], rec.rng_seed);
        p.label = static_cast<std::int32_t>(rec.original_label);
        decoded.patches.push_back(std::move(p));
    }
    write_patchset(decoded, out_path);
    std::printf("decoded %zu record(s) -> %s\n", records.size(),
                out_path.c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs,
               std::vector<std::string> labels, const std::string& csv_path,
               const std::string& summary_path) {
    if (!labels.empty() && labels.size() != inputs.size())
        throw ConfigError("--labels: need exactly one label per report");
    if (labels.empty())
        for (const std::string& path : inputs)
            labels.push_back(fs::path(path).stem().string());
    std::vector<SessionReport> reports;
    for (const std::string& path : inputs) reports.push_back(load_report(path));
    std::string csv = reports_csv(reports, labels);
    std::string summary = reports_summary(reports, labels);
    write_text(csv_path, csv);
    write_text(summary_path, summary);
    std::fputs(summary.c_str(), stdout);
    std::printf("csv -> %s\nsummary -> %s\n", csv_path.c_str(),
                summary_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"differential tester for float vs int8-quantized classifiers"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    std::uint32_t threads = 1;
    std::string out_dir = ".";
    auto* seed_opt = app.add_option("--seed", seed, "global rng seed");
    app.add_option("--threads", threads,
                   "fitness evaluation workers per generation");
    app.add_option("--out", out_dir, "output directory");

    auto* quantize = app.add_subcommand("quantize", "post-training int8 quantization");
    std::string q_model, q_mode = "weights_only", q_calibration, q_out = "quantized.json";
    quantize->add_option("--model", q_model, "float model (qdiff-model json)")->required();
    quantize->add_option("--mode", q_mode, "weights_only or full");
    quantize->add_option("--calibration", q_calibration, "calibration patch set (required for full)");
    quantize->add_option("--output", q_out, "output file name");

    auto* profile = app.add_subcommand("profile", "record per-neuron activation intervals");
    std::string p_model, p_patches, p_out = "intervals.json";
    std::uint32_t p_k = 10;
    profile->add_option("--model", p_model, "float model")->required();
    profile->add_option("--patches", p_patches, "profiling patch set")->required();
    profile->add_option("--k", p_k, "sections per neuron interval");
    profile->add_option("--output", p_out, "output file name");

    auto* tune = app.add_subcommand("tune", "narrow distortion bounds to a PSNR floor");
    std::string t_patches, t_out = "bounds.json", t_audit = "tune_audit.csv";
    double t_psnr = 20.0;
    std::size_t t_budget = 200;
    tune->add_option("--patches", t_patches, "tuning patch set")->required();
    tune->add_option("--psnr", t_psnr, "median PSNR floor in dB");
    tune->add_option("--budget", t_budget, "samples per family per step (>= 100)");
    tune->add_option("--output", t_out, "bounds file name");
    tune->add_option("--audit", t_audit, "audit csv file name");

    auto* run = app.add_subcommand("run", "search for difference-inducing inputs");
    std::string r_config, r_report = "report.json", r_offload = "dii.bin";
    run->add_option("--config", r_config, "session config (qdiff-session json)")->required();
    run->add_option("--report", r_report, "report file name");
    run->add_option("--offload", r_offload, "difference-inducing record file name");

    auto* dec = app.add_subcommand("decode", "rebuild distorted patches from stored records");
    std::string d_dii, d_patches, d_bounds, d_out = "decoded.bin";
    dec->add_option("--dii", d_dii, "record file from a run")->required();
    dec->add_option("--patches", d_patches, "the seed patch set the run used")->required();
    dec->add_option("--bounds", d_bounds, "bounds file the run used (defaults otherwise)");
    dec->add_option("--output", d_out, "decoded patch set file name");

    auto* rep = app.add_subcommand("report", "tabulate and compare session reports");
    std::vector<std::string> rp_inputs, rp_labels;
    std::string rp_csv = "report.csv", rp_summary = "summary.txt";
    rep->add_option("--inputs", rp_inputs, "session report files")->required()->expected(-1);
    rep->add_option("--labels", rp_labels, "one label per report");
    rep->add_option("--csv", rp_csv, "csv file name");
    rep->add_option("--summary", rp_summary, "summary file name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        ensure_out_dir(out_dir);
        if (quantize->parsed()) {
            if (quant_mode_from_name(q_mode) == QuantMode::full &&
                q_calibration.empty())
                throw ConfigError("--calibration: required for full mode");
            return cmd_quantize(q_model, q_mode, q_calibration,
                                join_out(out_dir, q_out));
        }
        if (profile->parsed())
            return cmd_profile(p_model, p_patches, p_k, join_out(out_dir, p_out));
        if (tune->parsed()) {
            if (t_budget < 100)
                throw ConfigError("--budget: must be >= 100 samples");
            return cmd_tune(t_patches, t_psnr, t_budget, seed,
                            join_out(out_dir, t_out), join_out(out_dir, t_audit));
        }
        if (run->parsed())
            return cmd_run(r_config, seed_opt->count() > 0, seed, threads,
                           join_out(out_dir, r_report),
                           join_out(out_dir, r_offload));
        if (dec->parsed())
            return cmd_decode(d_dii, d_patches, d_bounds, join_out(out_dir, d_out));
        if (rep->parsed())
            return cmd_report(rp_inputs, rp_labels, join_out(out_dir, rp_csv),
                              join_out(out_dir, rp_summary));
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
