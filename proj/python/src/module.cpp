#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "flowlab/geometry.hpp"
#include "flowlab/io.hpp"
#include "flowlab/sampler.hpp"
#include "flowlab/synthdata.hpp"
#include "flowlab/trainer.hpp"

namespace py = pybind11;
using namespace flowlab;

namespace {

Eigen::MatrixXd to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw std::runtime_error("expected a 2-D array");
    Eigen::MatrixXd m(arr.shape(0), arr.shape(1));
    auto r = arr.unchecked<2>();
    for (py::ssize_t i = 0; i < arr.shape(0); ++i)
        for (py::ssize_t j = 0; j < arr.shape(1); ++j) m(i, j) = r(i, j);
    return m;
}

py::dict batch_to_dict(const FeatureBatch& fb) {
    py::array_t<float> patches({fb.b, fb.c, fb.h, fb.w});
    std::copy(fb.patches.begin(), fb.patches.end(), patches.mutable_data());
    py::array_t<float> cls({fb.b, fb.c});
    std::copy(fb.cls.begin(), fb.cls.end(), cls.mutable_data());
    py::array_t<int32_t> labels(fb.b);
    std::copy(fb.labels.begin(), fb.labels.end(), labels.mutable_data());
    py::dict d;
    d["patches"] = patches;
    d["cls"] = cls;
    d["labels"] = labels;
    return d;
}

GeneratorSpec spec_from_kwargs(const std::string& kind, uint64_t seed, const py::kwargs& kwargs) {
    GeneratorSpec spec;
    spec.kind = kind;
    spec.apply_kind_defaults();
    spec.seed = seed;
    for (auto item : kwargs) {
        const std::string key = py::str(item.first);
        if (key == "channels") spec.channels = py::cast<int>(item.second);
        else if (key == "grid_h") spec.grid_h = py::cast<int>(item.second);
        else if (key == "grid_w") spec.grid_w = py::cast<int>(item.second);
        else if (key == "intrinsic_dim") spec.intrinsic_dim = py::cast<int>(item.second);
        else if (key == "num_classes") spec.num_classes = py::cast<int>(item.second);
        else if (key == "cond_target") spec.cond_target = py::cast<double>(item.second);
        else if (key == "tail_dof") spec.tail_dof = py::cast<double>(item.second);
        else if (key == "norm_pinning") spec.norm_pinning = py::cast<bool>(item.second);
        else if (key == "class_shift_norm") spec.class_shift_norm = py::cast<double>(item.second);
        else throw std::runtime_error("unknown generator field: " + key);
    }
    return spec;
}

}  // namespace

PYBIND11_MODULE(_flowlab, m) {
    m.doc() = "flow-matching geometry laboratory (C++ core)";

    m.def(
        "generate",
        [](const std::string& kind, int n, uint64_t seed, const py::kwargs& kwargs) {
            SynthGenerator gen(spec_from_kwargs(kind, seed, kwargs));
            return batch_to_dict(gen.generate(n));
        },
        py::arg("kind"), py::arg("n"), py::arg("seed") = 0,
        "Generate a synthetic class-conditional feature batch.");

    m.def(
        "pca_spectrum",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& data, int k) {
            const Spectrum s = pca_spectrum(to_matrix(data), k);
            return py::make_tuple(s.eigenvalues, s.normalized);
        },
        py::arg("data"), py::arg("k"));

    m.def(
        "effective_rank",
        [](const std::vector<double>& eigenvalues) {
            Spectrum s;
            s.eigenvalues = eigenvalues;
            for (double v : eigenvalues) s.total_variance += v;
            s.normalized.resize(eigenvalues.size(), 0.0);
            if (s.total_variance > 0)
                for (size_t i = 0; i < eigenvalues.size(); ++i) s.normalized[i] = eigenvalues[i] / s.total_variance;
            return effective_rank(s);
        },
        py::arg("eigenvalues"));

    m.def(
        "twonn",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& data, int subsample, int bootstraps,
           uint64_t seed) {
            const TwoNNResult r = twonn(to_matrix(data), subsample, bootstraps, seed);
            return py::make_tuple(r.mean, r.std);
        },
        py::arg("data"), py::arg("subsample") = 5000, py::arg("bootstraps") = 10, py::arg("seed") = 0);

    m.def(
        "excess_kurtosis",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& data) {
            return excess_kurtosis(to_matrix(data));
        },
        py::arg("data"));

    m.def(
        "conditioning_curve",
        [](const std::vector<double>& eigenvalues, const std::vector<double>& t_points) {
            Spectrum s;
            s.eigenvalues = eigenvalues;
            for (double v : eigenvalues) s.total_variance += v;
            s.normalized.assign(eigenvalues.size(), 0.0);
            return conditioning_curve(s, t_points);
        },
        py::arg("eigenvalues"), py::arg("t_points"));

    m.def(
        "geometry_report",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& data, uint64_t seed) {
            GeometryConfig cfg;
            cfg.twonn_subsample = 2000;
            cfg.twonn_bootstraps = 5;
            const GeometryReport r = geometry_report(to_matrix(data), cfg, seed);
            py::module json_mod = py::module::import("json");
            return json_mod.attr("loads")(report_to_json(r));
        },
        py::arg("data"), py::arg("seed") = 0);

    m.def("compute_shift", &compute_shift, py::arg("h"), py::arg("w"), py::arg("d"));
    m.def("time_shift", &time_shift, py::arg("x"), py::arg("s"));

    m.def(
        "sample_time",
        [](double s, int n, uint64_t seed, double t_lo, double t_hi) {
            TimeSampler sampler{s, t_lo, t_hi};
            Rng rng(seed);
            return sample_time(sampler, n, rng);
        },
        py::arg("s") = 1.0, py::arg("n") = 1, py::arg("seed") = 0, py::arg("t_lo") = 1e-3, py::arg("t_hi") = 0.999);

    m.def(
        "make_grid",
        [](const std::string& kind, int k, double shift_s) {
            SamplerConfig p;
            p.shift_s = shift_s;
            return make_grid(kind, k, p).knots;
        },
        py::arg("kind"), py::arg("k"), py::arg("shift_s") = 4.9);

    m.def(
        "mmd",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& y) {
            return mmd_metric(to_matrix(x), to_matrix(y));
        },
        py::arg("generated"), py::arg("reference"));

    m.def(
        "train_run",
        [](const std::string& config_json, const std::string& out_dir) {
            const RunConfig c = RunConfig::from_json(config_json);
            GeneratorSpec spec = c.generator;
            spec.seed = substream_seed(c.seed, "dataset");
            SynthGenerator gen(spec);
            Trainer tr(c);
            tr.prepare(gen.generate(c.trainer.data_size));
            const auto metrics = tr.train(out_dir);
            py::dict d;
            d["steps"] = metrics.size();
            d["first_loss"] = metrics.empty() ? 0.0 : metrics.front().loss;
            d["final_loss"] = metrics.empty() ? 0.0 : metrics.back().loss;
            d["rejected_steps"] = tr.rejected_steps();
            return d;
        },
        py::arg("config_json"), py::arg("out_dir") = "",
        "Train a denoiser from a JSON run configuration; returns a summary.");

    m.def(
        "sample_run",
        [](const std::string& checkpoint_path, int n, const std::string& schedule, int steps,
           const std::string& solver, bool guided, double w, const std::string& cls_init, const std::string& ema,
           uint64_t seed) {
            const Checkpoint ck = load_checkpoint(checkpoint_path);
            RunConfig c = RunConfig::from_json(ck.config_json);
            Denoiser net(c.denoiser);
            net.params = ck.section(ema == "raw" ? "params" : (ema == "0.9996" ? "ema_b" : "ema_a"));
            StandardizationStats stats;
            stats.c = c.denoiser.channels;
            stats.h = c.denoiser.grid_h;
            stats.w = c.denoiser.grid_w;
            stats.patch_mean = ck.section("stats_patch_mean");
            stats.patch_std = ck.section("stats_patch_std");
            stats.cls_mean = ck.section("stats_cls_mean");
            stats.cls_std = ck.section("stats_cls_std");

            SamplerConfig sc = c.sampler;
            sc.schedule = schedule;
            sc.steps = steps;
            sc.solver = solver;
            sc.guidance = guided;
            sc.w = w;
            sc.w_cls = w;
            sc.cls_init = cls_init;
            sc.validate();
            const TimeGrid grid = make_grid(sc.schedule, sc.steps, sc);
            GuidanceConfig guidance{sc.guidance, sc.w, sc.w_cls, sc.interval_lo, sc.interval_hi};
            DenoiserField field(&net, nullptr, c.trainer.mode, sc.eps_t_clamp, guidance);
            Rng label_rng(substream_seed(seed, "sample-labels"));
            std::vector<int32_t> labels(n);
            for (auto& l : labels) l = int32_t(label_rng.uniform_int(c.denoiser.num_classes));
            const FeatureBatch out = integrate(field, grid, labels, substream_seed(seed, "sample-noise"), sc.solver,
                                               sc.cls_init, sc.sigma_eps, &stats);
            return batch_to_dict(out);
        },
        py::arg("checkpoint"), py::arg("n") = 64, py::arg("schedule") = "timeshift", py::arg("steps") = 25,
        py::arg("solver") = "heun", py::arg("guided") = false, py::arg("w") = 3.7,
        py::arg("cls_init") = "independent", py::arg("ema") = "0.9999", py::arg("seed") = 0);

    m.def("default_config_json", []() { return RunConfig{}.to_json(); });
}
