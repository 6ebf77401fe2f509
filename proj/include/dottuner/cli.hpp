#pragma once

// Command-line surface. Subcommands:
//   simulate  device config -> stability diagram CSV
//   process   diagram CSV -> transition-map PGM (+ report)
//   detect    diagram CSV or map PGM -> transition lines (+ overlay)
//   tune      device config or stored diagram -> tuning run report
//   bench     detector timing comparison on one map
// Exit codes: 0 success, 2 bad usage or input, 3 failed tuning run or
// internal error. JSON reports are bit-reproducible for fixed inputs and
// seeds except for the "timings_ms" and "bench" sections.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dottuner/io.hpp"

namespace dottuner {

namespace cli_detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// ----------------------------------------------------------------------------
// Shared flag groups
// ----------------------------------------------------------------------------

/// Signal-chain flags. apply_to() overwrites only the fields whose flags were
/// actually given, so commands with their own profile defaults (tune) keep
/// them unless the user overrides.
struct SignalFlags {
    SignalParams p;
    bool pooled {false};
    bool no_median {false};

    CLI::Option* o_k {nullptr};
    CLI::Option* o_floor {nullptr};
    CLI::Option* o_guard {nullptr};
    CLI::Option* o_order {nullptr};
    CLI::Option* o_cut {nullptr};
    CLI::Option* o_chw {nullptr};
    CLI::Option* o_mcf {nullptr};
    CLI::Option* o_prom {nullptr};
    CLI::Option* o_bins {nullptr};
    CLI::Option* o_pool {nullptr};
    CLI::Option* o_med {nullptr};

    void attach(CLI::App* s) {
        o_k = s->add_option("--threshold-k", p.threshold_k,
                            "threshold rule T = mean - k*sigma (tune profile: 2)")
                  ->capture_default_str();
        o_floor = s->add_option("--sigma-floor", p.sigma_floor_frac,
                                "relative floor on sigma in the threshold")
                      ->capture_default_str();
        o_guard = s->add_option("--edge-guard", p.edge_guard_frac,
                                "fraction of samples ignored at each trace end")
                      ->capture_default_str();
        o_order = s->add_option("--filter-order", p.filter_order, "high-pass Butterworth order")
                      ->capture_default_str();
        o_cut = s->add_option("--cutoff", p.fixed_cutoff,
                              "fixed high-pass cutoff, cycles/V (0 = fit per row)")
                    ->capture_default_str();
        o_chw = s->add_option("--cutoff-halfwidths", p.cutoff_halfwidths,
                              "cutoff above the background lobe, in half-widths")
                    ->capture_default_str();
        o_mcf = s->add_option("--min-cutoff-frac", p.min_cutoff_frac,
                              "cutoff floor as a fraction of the oscillation peak")
                    ->capture_default_str();
        o_prom = s->add_option("--peak-prominence", p.peak_prominence,
                               "spectral peak prominence over the median magnitude")
                     ->capture_default_str();
        o_bins = s->add_option("--min-fit-bins", p.min_fit_bins,
                               "minimum spectrum bins handed to the background fit")
                     ->capture_default_str();
        o_pool = s->add_flag("--pooled", pooled, "pool mean/sigma across all rows");
        o_med = s->add_flag("--no-median", no_median, "disable the 3-sample phase prefilter");
    }

    void apply_to(SignalParams& dst) const {
        if (o_k->count())
            dst.threshold_k = p.threshold_k;
        if (o_floor->count())
            dst.sigma_floor_frac = p.sigma_floor_frac;
        if (o_guard->count())
            dst.edge_guard_frac = p.edge_guard_frac;
        if (o_order->count())
            dst.filter_order = p.filter_order;
        if (o_cut->count())
            dst.fixed_cutoff = p.fixed_cutoff;
        if (o_chw->count())
            dst.cutoff_halfwidths = p.cutoff_halfwidths;
        if (o_mcf->count())
            dst.min_cutoff_frac = p.min_cutoff_frac;
        if (o_prom->count())
            dst.peak_prominence = p.peak_prominence;
        if (o_bins->count())
            dst.min_fit_bins = p.min_fit_bins;
        if (o_pool->count())
            dst.pooled_stats = pooled;
        if (o_med->count())
            dst.median_prefilter = !no_median;
    }

    [[nodiscard]] SignalParams params() const {
        SignalParams q;
        apply_to(q);
        return q;
    }
};

/// Detector choice plus parameters of both detectors and the shared
/// line-reconstruction stage.
struct DetectorFlags {
    std::string kind {"hough"};
    HoughParams hough;
    EdlinesParams edlines;
    ReconstructionParams recon;
    double angle_tol_deg {ReconstructionParams {}.angle_tol * 180.0 / kPi};
    double doublon_angle_deg {EdlinesParams {}.doublon_angle * 180.0 / kPi};

    void attach(CLI::App* s) {
        s->add_option("--detector", kind, "line detector")
            ->check(CLI::IsMember({"hough", "edlines"}))
            ->capture_default_str();
        s->add_option("--min-cluster", hough.min_cluster, "hough: minimum cluster pixels")
            ->capture_default_str();
        s->add_option("--residual-factor", hough.residual_factor,
                      "hough: split while RMS > factor * width prior")
            ->capture_default_str();
        s->add_option("--smooth-sigma", edlines.sigma, "edlines: Gaussian smoothing width, px")
            ->capture_default_str();
        s->add_option("--anchor-threshold", edlines.anchor_threshold,
                      "edlines: minimum crest magnitude for an anchor")
            ->capture_default_str();
        s->add_option("--magnitude-floor", edlines.magnitude_floor,
                      "edlines: walking stops below this magnitude")
            ->capture_default_str();
        s->add_option("--fit-error-max", edlines.fit_error_max,
                      "edlines: max RMS while growing a segment, px")
            ->capture_default_str();
        s->add_option("--min-seg-len", edlines.min_seg_len,
                      "edlines: minimum chain pixels per segment")
            ->capture_default_str();
        s->add_option("--doublon-angle-deg", doublon_angle_deg,
                      "edlines: doublon angle gate, degrees")
            ->capture_default_str();
        s->add_option("--doublon-overlap", edlines.doublon_overlap,
                      "edlines: doublon overlap fraction")
            ->capture_default_str();
        s->add_option("--angle-tol-deg", angle_tol_deg, "reconstruction: angle gate, degrees")
            ->capture_default_str();
        s->add_option("--offset-tol", recon.offset_tol,
                      "reconstruction: endpoint-to-line gate, px")
            ->capture_default_str();
        s->add_option("--gap-max", recon.gap_max, "reconstruction: endpoint gap gate, px")
            ->capture_default_str();
        s->add_option("--width-prior", recon.width_prior,
                      "reconstruction: expected line thickness, px")
            ->capture_default_str();
        s->add_option("--min-line-support", recon.min_line_support,
                      "reconstruction: minimum pixels per line")
            ->capture_default_str();
    }

    /// Folds the degree-valued and shared flags into both parameter sets.
    void finalize() {
        recon.angle_tol = angle_tol_deg * kPi / 180.0;
        edlines.doublon_angle = doublon_angle_deg * kPi / 180.0;
        hough.recon = recon;
        edlines.recon = recon;
    }

    [[nodiscard]] bool use_hough() const { return kind == "hough"; }

    [[nodiscard]] std::vector<TransitionLine> run(const TransitionMap& map) const {
        return use_hough() ? detect_lines_hough(map, hough) : detect_lines_edlines(map, edlines);
    }

    [[nodiscard]] Json to_json() const {
        return Json {{"kind", kind},
                     {"hough", dottuner::to_json(hough)},
                     {"edlines", dottuner::to_json(edlines)}};
    }
};

/// The six axis flags of a measurement window.
struct WindowFlags {
    MeasurementWindow w {0.0, 0.0, 0.5, 0.0, 0.0, 2.5};

    void attach(CLI::App* s, const char* what) {
        const std::string prefix(what);
        s->add_option("--vg1-start", w.vg1_start, prefix + " vg1 start, mV")->required();
        s->add_option("--vg1-stop", w.vg1_stop, prefix + " vg1 stop, mV")->required();
        s->add_option("--vg1-step", w.vg1_step, prefix + " vg1 step, mV")->capture_default_str();
        s->add_option("--vg2-start", w.vg2_start, prefix + " vg2 start, mV")->required();
        s->add_option("--vg2-stop", w.vg2_stop, prefix + " vg2 stop, mV")->required();
        s->add_option("--vg2-step", w.vg2_step, prefix + " vg2 step, mV")->capture_default_str();
    }
};

// ----------------------------------------------------------------------------
// Per-command options and handlers
// ----------------------------------------------------------------------------

struct SimulateOpts {
    std::string config, out, report;
    std::uint64_t seed {0};
    CLI::Option* seed_opt {nullptr};
    WindowFlags win;
};

inline int run_simulate(const SimulateOpts& o) {
    const auto t0 = Clock::now();
    DeviceConfig dc = load_device_config(o.config);
    if (o.seed_opt->count())
        dc.seed = o.seed;
    DeviceModel model(dc);
    o.win.w.validate();
    const StabilityDiagram d = model.measure_diagram(o.win.w);
    const double simulate_ms = ms_since(t0);

    const auto t1 = Clock::now();
    save_diagram(d, o.out);
    const double save_ms = ms_since(t1);

    if (!o.report.empty()) {
        Json rep = make_report("simulate");
        rep["seed"] = dc.seed;
        rep["config"] = Json {{"device", to_json(dc)}, {"window", to_json(o.win.w)}};
        rep["artifacts"]["diagram_csv"] = o.out;
        rep["timings_ms"]["simulate"] = simulate_ms;
        rep["timings_ms"]["save"] = save_ms;
        write_report(rep, o.report);
    }
    std::printf("simulated %d x %d diagram -> %s\n", d.data.rows(), d.data.cols(), o.out.c_str());
    return 0;
}

struct ProcessOpts {
    std::string in, out, report;
    SignalFlags sig;
};

inline int run_process(const ProcessOpts& o) {
    const auto t0 = Clock::now();
    const StabilityDiagram d = load_diagram(o.in);
    const double load_ms = ms_since(t0);

    const SignalParams params = o.sig.params();
    const auto t1 = Clock::now();
    const TransitionMap map = process_diagram(d, params);
    const double process_ms = ms_since(t1);

    Json rep = make_report("process");
    rep["config"] = Json {{"signal", to_json(params)}};
    rep["window"] = to_json(d.window);
    rep["rows"] = row_status_json(map);
    rep["active_pixels"] = map.active_pixels();
    rep["timings_ms"]["load"] = load_ms;
    rep["timings_ms"]["process"] = process_ms;
    if (!o.out.empty()) {
        const auto t2 = Clock::now();
        save_map_pgm(map, o.out);
        rep["timings_ms"]["save"] = ms_since(t2);
        rep["artifacts"]["map_pgm"] = o.out;
    }
    if (!o.report.empty())
        write_report(rep, o.report);

    int ok = 0;
    for (const auto s : map.row_status)
        ok += s == RowStatus::Ok ? 1 : 0;
    std::printf("flagged %zu pixels; %d/%d rows ok -> %s\n", map.active_pixels(), ok,
                map.mask.rows(), o.out.empty() ? "(no map written)" : o.out.c_str());
    return 0;
}

/// Loads either input kind of detect/bench: a stored diagram (processed with
/// the given signal parameters) or a ready-made mask PGM.
inline TransitionMap load_input_map(const std::string& path, const SignalFlags& sig,
                                    Json& config_echo, Json& timings) {
    const auto t0 = Clock::now();
    if (path.ends_with(".pgm")) {
        TransitionMap map = load_map_pgm(path);
        timings["load"] = ms_since(t0);
        return map;
    }
    const StabilityDiagram d = load_diagram(path);
    timings["load"] = ms_since(t0);
    const SignalParams params = sig.params();
    config_echo["signal"] = to_json(params);
    const auto t1 = Clock::now();
    TransitionMap map = process_diagram(d, params);
    timings["process"] = ms_since(t1);
    return map;
}

struct DetectOpts {
    std::string in, map_out, overlay, report;
    SignalFlags sig;
    DetectorFlags det;
};

inline int run_detect(DetectOpts& o) {
    Json rep = make_report("detect");
    rep["config"] = Json::object();
    const TransitionMap map = load_input_map(o.in, o.sig, rep["config"], rep["timings_ms"]);

    o.det.finalize();
    rep["config"]["detector"] = o.det.to_json();
    const auto t0 = Clock::now();
    const auto lines = o.det.run(map);
    rep["timings_ms"]["detect"] = ms_since(t0);

    rep["window"] = to_json(map.window);
    rep["lines"] = Json::array();
    for (const auto& l : lines)
        rep["lines"].push_back(to_json(l, map.window));

    if (!o.map_out.empty()) {
        save_map_pgm(map, o.map_out);
        rep["artifacts"]["map_pgm"] = o.map_out;
    }
    if (!o.overlay.empty()) {
        save_overlay(map, lines, o.overlay);
        rep["artifacts"]["overlay_pgm"] = o.overlay;
    }
    if (!o.report.empty())
        write_report(rep, o.report);

    std::printf("detected %zu line(s) with %s\n", lines.size(), o.det.kind.c_str());
    return 0;
}

struct TuneOpts {
    std::string config, in, report, log_dir;
    std::uint64_t seed {0};
    CLI::Option* seed_opt {nullptr};
    CLI::Option* cfg_opt {nullptr};
    CLI::Option* in_opt {nullptr};
    WindowFlags win;
    SignalFlags sig;
    DetectorFlags det;
    TuneConfig tc;  ///< parse target for the scalar tuner flags
};

inline int run_tune(TuneOpts& o) {
    if (o.cfg_opt->count() + o.in_opt->count() != 1)
        throw ConfigError("tune: give exactly one of --config or --in");

    TuneConfig cfg = o.tc;
    cfg.start_window = o.win.w;
    o.sig.apply_to(cfg.signal);
    o.det.finalize();
    cfg.hough = o.det.hough;
    cfg.edlines = o.det.edlines;
    cfg.detector = o.det.use_hough() ? DetectorKind::kHough : DetectorKind::kEdlines;

    Json rep = make_report("tune");
    rep["config"] = Json::object();

    std::unique_ptr<DeviceModel> model;
    std::optional<SimulatorSource> sim_src;
    std::optional<DiagramSource> file_src;
    MeasurementSource* src = nullptr;
    if (o.cfg_opt->count()) {
        DeviceConfig dc = load_device_config(o.config);
        if (o.seed_opt->count())
            dc.seed = o.seed;
        rep["seed"] = dc.seed;
        rep["config"]["device"] = to_json(dc);
        model = std::make_unique<DeviceModel>(std::move(dc));
        sim_src.emplace(*model);
        src = &*sim_src;
    } else {
        const auto t0 = Clock::now();
        file_src.emplace(load_diagram(o.in));
        rep["timings_ms"]["load"] = ms_since(t0);
        rep["config"]["input"] = o.in;
    }

    const auto t1 = Clock::now();
    Tuner tuner(*src, cfg);
    const TuneResult res = tuner.run();
    rep["timings_ms"]["tune"] = ms_since(t1);
    rep["config"]["tune"] = to_json(res.config);
    rep["tune"] = to_json(res);

    if (!o.log_dir.empty()) {
        std::filesystem::create_directories(o.log_dir);
        Json files = Json::array();
        for (std::size_t i = 0; i < res.log.size(); ++i) {
            const auto& rec = res.log[i];
            char stem[64];
            std::snprintf(stem, sizeof stem, "%03zu_%s", i, to_string(rec.phase));
            const std::string base = o.log_dir + "/" + stem;
            save_diagram(rec.diagram, base + ".csv");
            save_map_pgm(rec.map, base + ".pgm");
            files.push_back(base + ".csv");
            files.push_back(base + ".pgm");
        }
        rep["artifacts"]["log"] = files;
    }
    if (!o.report.empty())
        write_report(rep, o.report);

    if (res.success)
        std::printf("tuned: vg1 = %.3f mV, vg2 = %.3f mV (budget %d)\n", res.final_vg1.mv,
                    res.final_vg2.mv, res.budget_used);
    else
        std::printf("tuning failed: %s (%s, budget %d)\n", res.message.c_str(),
                    to_string(res.failure), res.budget_used);
    return res.success ? 0 : 3;
}

struct BenchOpts {
    std::string in, report;
    int repeat {3};
    SignalFlags sig;
    DetectorFlags det;
};

inline int run_bench(BenchOpts& o) {
    Json rep = make_report("bench");
    rep["config"] = Json::object();
    const TransitionMap map = load_input_map(o.in, o.sig, rep["config"], rep["timings_ms"]);
    o.det.finalize();
    rep["config"]["detector"] = o.det.to_json();
    rep["config"]["repeat"] = o.repeat;

    double hough_ms = std::numeric_limits<double>::infinity();
    double edlines_ms = std::numeric_limits<double>::infinity();
    std::vector<TransitionLine> hough_lines, edlines_lines;
    for (int i = 0; i < o.repeat; ++i) {
        const auto t0 = Clock::now();
        hough_lines = detect_lines_hough(map, o.det.hough);
        hough_ms = std::min(hough_ms, ms_since(t0));
        const auto t1 = Clock::now();
        edlines_lines = detect_lines_edlines(map, o.det.edlines);
        edlines_ms = std::min(edlines_ms, ms_since(t1));
    }
    const double ratio = hough_ms / std::max(edlines_ms, 1e-9);

    rep["bench"] = Json {{"hough_ms", hough_ms},
                         {"edlines_ms", edlines_ms},
                         {"ratio", ratio},
                         {"hough_lines", hough_lines.size()},
                         {"edlines_lines", edlines_lines.size()}};
    if (!o.report.empty())
        write_report(rep, o.report);

    std::printf("hough_ms=%.3f edlines_ms=%.3f ratio=%.2f hough_lines=%zu edlines_lines=%zu\n",
                hough_ms, edlines_ms, ratio, hough_lines.size(), edlines_lines.size());
    return 0;
}

}  // namespace cli_detail

// ============================================================================
// Entry point
// ============================================================================

inline int run_cli(int argc, char** argv) {
    CLI::App app {"single-quantum-dot auto-tuning toolkit"};
    app.require_subcommand(1);
    app.footer("environment: DOTTUNER_THREADS caps worker threads (unset or 0 = all cores)");

    cli_detail::SimulateOpts sim_o;
    auto* sim = app.add_subcommand("simulate", "render a synthetic diagram from a device config");
    sim->add_option("--config", sim_o.config, "device configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    sim_o.win.attach(sim, "scan");
    sim->add_option("--out", sim_o.out, "diagram CSV path")->required();
    sim->add_option("--report", sim_o.report, "JSON report path");
    sim_o.seed_opt = sim->add_option("--seed", sim_o.seed, "override the config seed");

    cli_detail::ProcessOpts proc_o;
    auto* proc = app.add_subcommand("process", "run the signal chain over a diagram");
    proc->add_option("--in", proc_o.in, "diagram CSV path")->required()->check(CLI::ExistingFile);
    proc->add_option("--out", proc_o.out, "transition-map PGM path");
    proc->add_option("--report", proc_o.report, "JSON report path");
    proc_o.sig.attach(proc);

    cli_detail::DetectOpts det_o;
    auto* det = app.add_subcommand("detect", "detect transition lines in a diagram or map");
    det->add_option("--in", det_o.in, "diagram CSV or map PGM path")
        ->required()
        ->check(CLI::ExistingFile);
    det->add_option("--map-out", det_o.map_out, "write the processed map as PGM");
    det->add_option("--overlay", det_o.overlay, "write a map+lines overlay PGM");
    det->add_option("--report", det_o.report, "JSON report path");
    det_o.sig.attach(det);
    det_o.det.attach(det);

    cli_detail::TuneOpts tune_o;
    auto* tun = app.add_subcommand("tune", "run the adaptive tuning state machine");
    tune_o.cfg_opt = tun->add_option("--config", tune_o.config, "device configuration file")
                         ->check(CLI::ExistingFile);
    tune_o.in_opt =
        tun->add_option("--in", tune_o.in, "stored diagram CSV path")->check(CLI::ExistingFile);
    tune_o.cfg_opt->excludes(tune_o.in_opt);
    tune_o.seed_opt = tun->add_option("--seed", tune_o.seed, "override the config seed")
                          ->needs(tune_o.cfg_opt);
    tune_o.win.attach(tun, "start window");
    tun->add_option("--out,--report", tune_o.report, "JSON report path");
    tun->add_option("--log-dir", tune_o.log_dir, "dump every measured window as CSV+PGM");
    tun->add_option("--budget", tune_o.tc.max_measurements, "measurement budget")
        ->capture_default_str();
    tun->add_option("--window-height", tune_o.tc.window_height_px, "rows per sub-diagram")
        ->capture_default_str();
    tun->add_option("--cycles-required", tune_o.tc.cycles_required,
                    "minimum oscillation cycles per row")
        ->capture_default_str();
    tun->add_option("--cycles-per-window", tune_o.tc.cycles_per_window,
                    "cycles per row actually measured")
        ->capture_default_str();
    tun->add_option("--diagonal-step", tune_o.tc.diagonal_step,
                    "diagonal displacement, fraction of window")
        ->capture_default_str();
    tun->add_option("--confirm-scale", tune_o.tc.confirm_scale, "confirmation window scale")
        ->capture_default_str();
    tun->add_option("--broaden-patience", tune_o.tc.broaden_patience,
                    "follow-up misses before a line counts as gone")
        ->capture_default_str();
    tun->add_option("--follow-gap-rows", tune_o.tc.follow_gap_rows,
                    "blank rows between follow-up windows")
        ->capture_default_str();
    tun->add_option("--descend-overlap", tune_o.tc.descend_overlap,
                    "column overlap between descend windows")
        ->capture_default_str();
    tun->add_option("--empty-margin", tune_o.tc.empty_margin_mv,
                    "empty-dot margin, mV (0 = auto)")
        ->capture_default_str();
    tun->add_option("--final-offset-widths", tune_o.tc.final_offset_widths,
                    "final vg1 offset, multiples of the line width")
        ->capture_default_str();
    tun->add_option("--match-tol", tune_o.tc.match_tol_frac,
                    "line-match tolerance, fraction of window width")
        ->capture_default_str();
    tune_o.sig.attach(tun);
    tune_o.det.attach(tun);

    cli_detail::BenchOpts bench_o;
    auto* ben = app.add_subcommand("bench", "time both detectors on the same map");
    ben->add_option("--in", bench_o.in, "diagram CSV or map PGM path")
        ->required()
        ->check(CLI::ExistingFile);
    ben->add_option("--report", bench_o.report, "JSON report path");
    ben->add_option("--repeat", bench_o.repeat, "timing repetitions (best-of)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    bench_o.sig.attach(ben);
    bench_o.det.attach(ben);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed())
            return cli_detail::run_simulate(sim_o);
        if (proc->parsed())
            return cli_detail::run_process(proc_o);
        if (det->parsed())
            return cli_detail::run_detect(det_o);
        if (tun->parsed())
            return cli_detail::run_tune(tune_o);
        if (ben->parsed())
            return cli_detail::run_bench(bench_o);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const SignalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const GeometryError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace dottuner
