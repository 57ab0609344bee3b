#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>

#include "flowlab/geometry.hpp"
#include "flowlab/io.hpp"
#include "flowlab/sampler.hpp"
#include "flowlab/synthdata.hpp"
#include "flowlab/trainer.hpp"

using namespace flowlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_config(const GlobalArgs& g, const std::string& experiment) {
    RunConfig c = g.config_path.empty() ? RunConfig{} : RunConfig::from_file(g.config_path);
    if (g.seed_set) c.seed = g.seed;
    c.experiment = experiment;
    c.validate();
    return c;
}

GeneratorSpec dataset_spec(const RunConfig& c) {
    GeneratorSpec spec = c.generator;
    spec.seed = substream_seed(c.seed, "dataset");
    return spec;
}

struct LoadedModel {
    RunConfig config;
    std::unique_ptr<Denoiser> net;
    StandardizationStats stats;
};

LoadedModel load_model(const std::string& path, const std::string& ema_track) {
    const Checkpoint ck = load_checkpoint(path);
    LoadedModel m;
    m.config = RunConfig::from_json(ck.config_json);
    m.net = std::make_unique<Denoiser>(m.config.denoiser);
    const std::string section = ema_track == "raw" ? "params" : (ema_track == "0.9996" ? "ema_b" : "ema_a");
    m.net->params = ck.section(section);
    m.stats.c = m.config.denoiser.channels;
    m.stats.h = m.config.denoiser.grid_h;
    m.stats.w = m.config.denoiser.grid_w;
    m.stats.patch_mean = ck.section("stats_patch_mean");
    m.stats.patch_std = ck.section("stats_patch_std");
    m.stats.cls_mean = ck.section("stats_cls_mean");
    m.stats.cls_std = ck.section("stats_cls_std");
    return m;
}

void write_meta(const std::string& out_dir, const std::string& command, double seconds) {
    // timestamps live here and only here, so outputs stay byte-reproducible
    json j;
    j["command"] = command;
    j["finished_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
    j["duration_seconds"] = seconds;
    std::ofstream os(fs::path(out_dir) / "run_meta.json");
    os << j.dump(2) << "\n";
}

void write_feature_batch(const FeatureBatch& fb, const std::string& out_dir, const std::string& stem) {
    write_tensor((fs::path(out_dir) / (stem + "_patches.rft")).string(),
                 {uint64_t(fb.b), uint64_t(fb.c), uint64_t(fb.h), uint64_t(fb.w)}, fb.patches);
    write_tensor((fs::path(out_dir) / (stem + "_cls.rft")).string(), {uint64_t(fb.b), uint64_t(fb.c)}, fb.cls);
    std::vector<float> labels(fb.labels.begin(), fb.labels.end());
    write_tensor((fs::path(out_dir) / (stem + "_labels.rft")).string(), {uint64_t(fb.b)}, labels);
}

double interp_mse_at(const std::vector<std::pair<double, double>>& curve, double t) {
    double best = 0.0, gap = 1e9;
    for (const auto& [ti, v] : curve)
        if (std::abs(ti - t) < gap) {
            gap = std::abs(ti - t);
            best = v;
        }
    return best;
}

// ---- geometry ----------------------------------------------------------------

int cmd_geometry(const GlobalArgs& g, const std::string& regimes_arg, const std::string& input_path,
                 const std::string& input_cls_path) {
    const RunConfig c = load_config(g, "geometry");
    fs::create_directories(g.out_dir);
    const auto t0 = std::chrono::steady_clock::now();

    if (!input_path.empty()) {
        // audit an externally exported feature tensor (flattened N x D)
        const Tensor t = read_tensor(input_path);
        if (t.dims.size() < 2) throw std::runtime_error("geometry: input tensor must have rank >= 2");
        const auto n = static_cast<Eigen::Index>(t.dims[0]);
        const auto d = static_cast<Eigen::Index>(t.numel() / t.dims[0]);
        Eigen::MatrixXd data(n, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < d; ++j) data(i, j) = t.values[i * d + j];
        GeometryReport r = geometry_report(data, c.geometry, c.seed);
        if (!input_cls_path.empty()) {
            const Tensor tc = read_tensor(input_cls_path);  // audited the same way, reported separately
            if (tc.dims.size() != 2 || tc.dims[0] != t.dims[0])
                throw std::runtime_error("geometry: cls tensor must be [N, C] with matching N");
        }
        emit_jsonl({report_to_json(r)}, (fs::path(g.out_dir) / "report.jsonl").string());
        std::vector<CsvRow> curve;
        for (const auto& [ti, k] : r.conditioning_curve)
            curve.push_back({{"t", ti}, {"kappa", k}});
        emit_csv(curve, (fs::path(g.out_dir) / "conditioning_curve.csv").string());
        write_meta(g.out_dir, "geometry", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        return 0;
    }

    std::vector<std::string> regimes;
    std::string token;
    std::stringstream ss(regimes_arg.empty() ? c.generator.kind : regimes_arg);
    while (std::getline(ss, token, ',')) regimes.push_back(token);

    std::vector<CsvRow> summary;
    std::vector<std::string> reports;
    for (const std::string& kind : regimes) {
        GeneratorSpec spec = dataset_spec(c);
        spec.kind = kind;
        spec.apply_kind_defaults();
        SynthGenerator gen(spec);
        const FeatureBatch fb = gen.generate(c.geometry.n_samples);
        const Eigen::MatrixXd flat = flatten_patches(fb);
        GeometryReport r = geometry_report(flat, c.geometry, c.seed);

        // on-manifold interpolation through the shared nearest-neighbor oracle
        const Eigen::MatrixXd ref = gen.reference_sample(c.geometry.interp_reference);
        const auto oracle = make_nn_oracle(gen, ref, c.seed);
        std::map<int32_t, std::vector<int>> by_class;
        for (int i = 0; i < fb.b; ++i) by_class[fb.labels[i]].push_back(i);
        std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
        for (const auto& [label, idx] : by_class)
            for (size_t j = 0; j + 1 < idx.size() && pairs.size() < size_t(c.geometry.interp_pairs); j += 2)
                pairs.emplace_back(flat.row(idx[j]).transpose(), flat.row(idx[j + 1]).transpose());
        r.interpolation_curve = interpolation_score(pairs, c.geometry.interp_steps, oracle.fn,
                                                    oracle.endpoint_tolerance);
        double interior = 0.0;
        for (size_t i = 1; i + 1 < r.interpolation_curve.size(); ++i) interior += r.interpolation_curve[i].second;
        r.interpolation_mse = interior / std::max<size_t>(1, r.interpolation_curve.size() - 2);

        json rj = json::parse(report_to_json(r));
        rj["regime"] = kind;
        rj["oracle_nn_resolution"] = oracle.nn_resolution;  // endpoint sanity statistic, no pass/fail bar
        reports.push_back(rj.dump());

        std::vector<CsvRow> curve;
        for (const auto& [ti, k] : r.conditioning_curve) curve.push_back({{"t", ti}, {"kappa", k}});
        emit_csv(curve, (fs::path(g.out_dir) / ("conditioning_curve_" + kind + ".csv")).string());
        std::vector<CsvRow> icurve;
        for (const auto& [ti, v] : r.interpolation_curve) icurve.push_back({{"t", ti}, {"sq_dist", v}});
        emit_csv(icurve, (fs::path(g.out_dir) / ("interpolation_" + kind + ".csv")).string());

        double kappa09 = 0.0;
        for (const auto& [ti, k] : r.conditioning_curve)
            if (std::abs(ti - 0.9) < 1e-12) kappa09 = k;
        summary.push_back({{"regime", kind},
                           {"effective_rank", r.effective_rank},
                           {"intrinsic_dim_mean", r.intrinsic_dim_mean},
                           {"intrinsic_dim_std", r.intrinsic_dim_std},
                           {"median_abs_kurtosis", r.kurtosis.median_abs},
                           {"kappa_at_0p9", kappa09},
                           {"interp_mse_mid", interp_mse_at(r.interpolation_curve, 0.5)}});
    }
    emit_jsonl(reports, (fs::path(g.out_dir) / "report.jsonl").string());
    emit_csv(summary, (fs::path(g.out_dir) / "summary.csv").string());
    write_meta(g.out_dir, "geometry", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
}

// ---- train -------------------------------------------------------------------

int cmd_train(const GlobalArgs& g) {
    const RunConfig c = load_config(g, "train");
    fs::create_directories(g.out_dir);
    const auto t0 = std::chrono::steady_clock::now();

    SynthGenerator gen(dataset_spec(c));
    const FeatureBatch data = gen.generate(c.trainer.data_size);
    Trainer tr(c);
    tr.prepare(data);
    const auto metrics = tr.train(g.out_dir);

    json j;
    j["steps"] = metrics.size();
    j["final_loss"] = metrics.empty() ? 0.0 : metrics.back().loss;
    j["rejected_steps"] = tr.rejected_steps();
    j["checkpoint"] = (fs::path(g.out_dir) / "checkpoint.rfcp").string();
    std::ofstream(fs::path(g.out_dir) / "train_summary.json") << j.dump(2) << "\n";
    write_meta(g.out_dir, "train", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
}

// ---- sample ------------------------------------------------------------------

struct SampleOverrides {
    SamplerConfig values;
    std::map<std::string, CLI::Option*> opts;
    bool set(const std::string& name) const { return opts.count(name) && opts.at(name)->count() > 0; }
};

int cmd_sample(const GlobalArgs& g, const std::string& checkpoint, const SampleOverrides& ov) {
    fs::create_directories(g.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    const std::string ema = ov.set("ema") ? ov.values.ema : "0.9999";
    LoadedModel m = load_model(checkpoint, ema);
    RunConfig c = m.config;
    c.sampler.ema = ema;
    if (ov.set("solver")) c.sampler.solver = ov.values.solver;
    if (ov.set("schedule")) c.sampler.schedule = ov.values.schedule;
    if (ov.set("steps")) c.sampler.steps = ov.values.steps;
    if (ov.set("w")) c.sampler.w = ov.values.w;
    if (ov.set("w_cls")) c.sampler.w_cls = ov.values.w_cls;
    if (ov.set("guided")) c.sampler.guidance = ov.values.guidance;
    if (ov.set("interval_lo")) c.sampler.interval_lo = ov.values.interval_lo;
    if (ov.set("interval_hi")) c.sampler.interval_hi = ov.values.interval_hi;
    if (ov.set("cls_init")) c.sampler.cls_init = ov.values.cls_init;
    if (ov.set("n")) c.sampler.n_samples = ov.values.n_samples;
    if (g.seed_set) c.seed = g.seed;
    c.sampler.validate();

    const TimeGrid grid = make_grid(c.sampler.schedule, c.sampler.steps, c.sampler);
    GuidanceConfig guidance{c.sampler.guidance, c.sampler.w, c.sampler.w_cls, c.sampler.interval_lo,
                            c.sampler.interval_hi};
    DenoiserField field(m.net.get(), nullptr, c.trainer.mode, c.sampler.eps_t_clamp, guidance);

    Rng label_rng(substream_seed(c.seed, "sample-labels"));
    std::vector<int32_t> labels(c.sampler.n_samples);
    for (auto& l : labels) l = int32_t(label_rng.uniform_int(c.denoiser.num_classes));

    const FeatureBatch out = integrate(field, grid, labels, substream_seed(c.seed, "sample-noise"),
                                       c.sampler.solver, c.sampler.cls_init, c.sampler.sigma_eps, &m.stats);
    write_feature_batch(out, g.out_dir, "samples");

    // distribution metrics against a freshly generated reference set
    GeneratorSpec ref_spec = dataset_spec(c);
    ref_spec.seed = substream_seed(c.seed, "metric-reference");
    SynthGenerator ref_gen(ref_spec);
    const FeatureBatch ref = ref_gen.generate(std::max(1000, c.sampler.n_samples));
    const Eigen::MatrixXd gen_flat = flatten_patches(out);
    const Eigen::MatrixXd ref_flat = flatten_patches(ref);

    Eigen::MatrixXd protos = Eigen::MatrixXd::Zero(c.generator.num_classes, ref_flat.cols());
    std::vector<int> counts(c.generator.num_classes, 0);
    for (int i = 0; i < ref.b; ++i) {
        protos.row(ref.labels[i]) += ref_flat.row(i);
        counts[ref.labels[i]]++;
    }
    for (int k = 0; k < c.generator.num_classes; ++k)
        if (counts[k] > 0) protos.row(k) /= double(counts[k]);

    json j;
    j["n_samples"] = out.b;
    j["schedule"] = c.sampler.schedule;
    j["steps"] = c.sampler.steps;
    j["solver"] = c.sampler.solver;
    j["guidance"] = c.sampler.guidance;
    j["mmd_vs_reference"] = mmd_metric(gen_flat, ref_flat);
    j["prototype_accuracy"] = prototype_accuracy(gen_flat, out.labels, protos);
    std::ofstream(fs::path(g.out_dir) / "sample_metrics.json") << j.dump(2) << "\n";
    write_meta(g.out_dir, "sample", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
}

// ---- ablate-schedules ----------------------------------------------------------

int cmd_ablate(const GlobalArgs& g, const std::string& checkpoint, const std::string& schedules_arg,
               const std::string& klist_arg, bool guided) {
    fs::create_directories(g.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    LoadedModel m = load_model(checkpoint, "0.9999");
    RunConfig c = m.config;
    if (g.seed_set) c.seed = g.seed;

    std::vector<std::string> schedules;
    std::string token;
    std::stringstream ss(schedules_arg);
    while (std::getline(ss, token, ',')) schedules.push_back(token);
    if (schedules.empty()) throw std::runtime_error("ablate-schedules: empty schedule list");
    std::vector<int> k_list;
    std::stringstream ks(klist_arg);
    while (std::getline(ks, token, ',')) k_list.push_back(std::stoi(token));
    if (k_list.empty()) throw std::runtime_error("ablate-schedules: empty K list");

    GeneratorSpec ref_spec = dataset_spec(c);
    ref_spec.seed = substream_seed(c.seed, "metric-reference");
    const Eigen::MatrixXd ref_flat = flatten_patches(SynthGenerator(ref_spec).generate(2000));

    Rng label_rng(substream_seed(c.seed, "sample-labels"));
    std::vector<int32_t> labels(c.sampler.n_samples);
    for (auto& l : labels) l = int32_t(label_rng.uniform_int(c.denoiser.num_classes));
    const uint64_t noise_seed = substream_seed(c.seed, "sample-noise");

    GuidanceConfig guidance{guided, c.sampler.w, c.sampler.w_cls, c.sampler.interval_lo, c.sampler.interval_hi};
    DenoiserField field(m.net.get(), nullptr, c.trainer.mode, c.sampler.eps_t_clamp, guidance);

    std::vector<CsvRow> rows;
    for (const auto& schedule : schedules) {
        for (int k : k_list) {
            SamplerConfig sc = c.sampler;
            sc.schedule = schedule;
            sc.steps = k;
            const TimeGrid grid = make_grid(schedule, k, sc);
            for (const std::string cls_init : {"independent", "coupled"}) {
                const FeatureBatch out =
                    integrate(field, grid, labels, noise_seed, "heun", cls_init, sc.sigma_eps, &m.stats);
                const double mmd = mmd_metric(flatten_patches(out), ref_flat);
                rows.push_back({{"schedule", schedule},
                                {"k", int64_t(k)},
                                {"guided", int64_t(guided ? 1 : 0)},
                                {"cls_init", cls_init},
                                {"mmd", mmd},
                                {"n_samples", int64_t(out.b)}});
            }
        }
    }
    emit_csv(rows, (fs::path(g.out_dir) / "schedule_ablation.csv").string());
    write_meta(g.out_dir, "ablate-schedules",
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
}

// ---- truncation ----------------------------------------------------------------

int cmd_truncation(const GlobalArgs& g, const std::vector<std::string>& checkpoints, const std::string& schedule,
                   int n_traj, int k_ref) {
    fs::create_directories(g.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    if (checkpoints.empty()) throw std::runtime_error("truncation: at least one checkpoint required");

    const std::vector<int> k_list{2, 5, 10, 25, 50};
    std::vector<CsvRow> rows;
    std::vector<double> decay_ratios;
    json summary;
    for (size_t mi = 0; mi < checkpoints.size(); ++mi) {
        LoadedModel m = load_model(checkpoints[mi], "0.9999");
        RunConfig c = m.config;
        if (g.seed_set) c.seed = g.seed;
        GuidanceConfig guidance{false, 1.0, 1.0, 0.1, 0.98};
        DenoiserField field(m.net.get(), nullptr, c.trainer.mode, c.sampler.eps_t_clamp, guidance);
        SamplerConfig sc = c.sampler;
        sc.schedule = schedule;
        const auto study = truncation_study(field, schedule, sc, k_list, k_ref, n_traj,
                                            substream_seed(c.seed, "truncation"), c.denoiser.num_classes, &m.stats);
        std::vector<int> ks;
        std::vector<double> errs;
        for (const auto& r : study) {
            rows.push_back({{"model", int64_t(mi)},
                            {"k", int64_t(r.k)},
                            {"mean_frobenius", r.mean},
                            {"std_frobenius", r.std}});
            ks.push_back(r.k);
            errs.push_back(std::max(r.mean, 1e-12));
        }
        const double ratio = errs.front() / errs.back();
        decay_ratios.push_back(ratio);
        summary["models"].push_back({{"checkpoint", checkpoints[mi]},
                                     {"decay_ratio_2_to_50", ratio},
                                     {"loglog_slope", loglog_slope(ks, errs)}});
    }
    if (decay_ratios.size() == 2) summary["ratio_a_over_b"] = decay_ratios[0] / decay_ratios[1];
    emit_csv(rows, (fs::path(g.out_dir) / "truncation.csv").string());
    std::ofstream(fs::path(g.out_dir) / "truncation_summary.json") << summary.dump(2) << "\n";
    write_meta(g.out_dir, "truncation", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowlab: flow-matching geometry laboratory"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration (JSON)");
    app.add_option("--out", g.out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");

    auto* geo = app.add_subcommand("geometry", "run the manifold diagnostics");
    std::string regimes, input_path, input_cls;
    geo->add_option("--regimes", regimes, "comma list of generator kinds (default: config kind)");
    geo->add_option("--input", input_path, "audit an external tensor file instead of generating");
    geo->add_option("--input-cls", input_cls, "optional CLS tensor accompanying --input");

    auto* train = app.add_subcommand("train", "train a denoiser");

    auto* sample = app.add_subcommand("sample", "sample from a checkpoint");
    std::string ck_path;
    SampleOverrides sopt;
    sample->add_option("--checkpoint", ck_path, "checkpoint path")->required();
    sopt.opts["solver"] = sample->add_option("--solver", sopt.values.solver, "euler|heun");
    sopt.opts["schedule"] = sample->add_option("--schedule", sopt.values.schedule, "time grid rule");
    sopt.opts["steps"] = sample->add_option("--steps", sopt.values.steps, "ODE steps K");
    sopt.opts["w"] = sample->add_option("--w", sopt.values.w, "guidance scale (patches)");
    sopt.opts["w_cls"] = sample->add_option("--w-cls", sopt.values.w_cls, "guidance scale (CLS)");
    sopt.opts["guided"] = sample->add_flag("--guided", sopt.values.guidance, "enable classifier-free guidance");
    sopt.opts["interval_lo"] = sample->add_option("--interval-lo", sopt.values.interval_lo, "guidance interval start");
    sopt.opts["interval_hi"] = sample->add_option("--interval-hi", sopt.values.interval_hi, "guidance interval end");
    sopt.opts["cls_init"] =
        sample->add_option("--cls-init", sopt.values.cls_init, "independent|coupled CLS noise at init");
    sopt.opts["n"] = sample->add_option("--n", sopt.values.n_samples, "number of samples");
    sopt.opts["ema"] = sample->add_option("--ema", sopt.values.ema, "raw|0.9999|0.9996");

    auto* ablate = app.add_subcommand("ablate-schedules", "MMD matrix over schedules and step counts");
    std::string ab_ck, ab_schedules = "uniform,cosine,logsnr,edm,power2,timeshift", ab_ks = "2,5,10,25,50";
    bool ab_guided = false;
    ablate->add_option("--checkpoint", ab_ck, "checkpoint path")->required();
    ablate->add_option("--schedules", ab_schedules, "comma list of schedules");
    ablate->add_option("--k-list", ab_ks, "comma list of step counts");
    ablate->add_flag("--guided", ab_guided, "enable classifier-free guidance");

    auto* trunc = app.add_subcommand("truncation", "truncation-error study against a fine reference");
    std::vector<std::string> trunc_cks;
    std::string trunc_schedule = "uniform";
    int trunc_n = 128, trunc_kref = 125;
    trunc->add_option("--checkpoint", trunc_cks, "checkpoint path (repeatable)")->required();
    trunc->add_option("--schedule", trunc_schedule, "time grid rule");
    trunc->add_option("--n", trunc_n, "trajectories per model");
    trunc->add_option("--k-ref", trunc_kref, "reference step count");

    std::string active = "";
    try {
        app.parse(argc, argv);
        g.seed_set = seed_opt->count() > 0;
        if (geo->parsed()) {
            active = "geometry";
            return cmd_geometry(g, regimes, input_path, input_cls);
        }
        if (train->parsed()) {
            active = "train";
            return cmd_train(g);
        }
        if (sample->parsed()) {
            active = "sample";
            return cmd_sample(g, ck_path, sopt);
        }
        if (ablate->parsed()) {
            active = "ablate-schedules";
            return cmd_ablate(g, ab_ck, ab_schedules, ab_ks, ab_guided);
        }
        if (trunc->parsed()) {
            active = "truncation";
            return cmd_truncation(g, trunc_cks, trunc_schedule, trunc_n, trunc_kref);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        json err;
        err["error"] = e.what();
        err["command"] = active;
        std::cout << err.dump() << std::endl;
        return 1;
    }
}
