#include "flowlab/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace flowlab {

using nlohmann::json;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error("config: " + msg);
}

// Strict field extraction: unknown keys are rejected so typos fail loudly.
template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

void check_known_keys(const json& j, const std::set<std::string>& known, const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it)
        require(known.count(it.key()) > 0, "unknown key '" + it.key() + "' in " + section);
}

}  // namespace

void GeneratorSpec::apply_kind_defaults() {
    if (kind == "shell") {
        cond_target = 1.25;
        tail_dof = 0.0;
        norm_pinning = true;
    } else if (kind == "mid") {
        cond_target = 6.0;
        tail_dof = 6.0;
        norm_pinning = false;
    } else if (kind == "spiky") {
        cond_target = 14.0;
        tail_dof = 3.0;
        norm_pinning = false;
    } else if (kind == "gmm2d") {
        channels = 2;
        grid_h = 1;
        grid_w = 1;
        intrinsic_dim = 2;
        num_classes = 8;
        cond_target = 1.0;
        tail_dof = 0.0;
        norm_pinning = false;
    }
}

void GeneratorSpec::validate() const {
    require(kind == "shell" || kind == "mid" || kind == "spiky" || kind == "gmm2d",
            "generator.kind must be shell|mid|spiky|gmm2d");
    require(channels >= 1 && grid_h >= 1 && grid_w >= 1, "generator dims must be >= 1");
    require(intrinsic_dim >= 1 && intrinsic_dim <= ambient_dim(), "generator.intrinsic_dim must be in [1, C*H*W]");
    require(num_classes >= 1, "generator.num_classes must be >= 1");
    require(cond_target >= 1.0, "generator.cond_target must be >= 1");
    require(!(intrinsic_dim == 1 && cond_target > 1.0),
            "generator: condition-number shaping infeasible for intrinsic_dim = 1");
    require(tail_dof == 0.0 || (tail_dof >= 3.0 && tail_dof == std::floor(tail_dof)),
            "generator.tail_dof must be 0 (Gaussian) or an integer >= 3");
    require(class_shift_norm >= 0.0, "generator.class_shift_norm must be >= 0");
    if (kind == "gmm2d") {
        require(channels == 2 && grid_h == 1 && grid_w == 1, "gmm2d requires C=2, H=W=1");
        require(num_classes == 8, "gmm2d is the 8-mode ring mixture");
    }
}

void DenoiserConfig::validate() const {
    require(hidden_dim >= 1 && layers >= 1 && heads >= 1, "denoiser dims must be >= 1");
    require(hidden_dim % heads == 0, "denoiser.hidden_dim must be divisible by heads");
    require(channels >= 1 && grid_h >= 1 && grid_w >= 1, "denoiser grid must be >= 1");
    require(num_classes >= 1, "denoiser.num_classes must be >= 1");
    require(ffn_mult >= 1, "denoiser.ffn_mult must be >= 1");
    require(time_feat_dim >= 2 && time_feat_dim % 2 == 0, "denoiser.time_feat_dim must be even and >= 2");
    require(attn_dropout >= 0.0 && attn_dropout < 1.0, "denoiser.attn_dropout must be in [0,1)");
    require(proj_dropout >= 0.0 && proj_dropout < 1.0, "denoiser.proj_dropout must be in [0,1)");
}

int TrainConfig::effective_warmup() const {
    if (warmup_steps >= 0) return warmup_steps;
    return std::max(1, steps / 20);  // 5% of total steps
}

void TrainConfig::validate() const {
    require(mode == "x" || mode == "v", "trainer.mode must be x|v");
    require(steps >= 1, "trainer.steps must be >= 1");
    require(batch_size >= 1, "trainer.batch_size must be >= 1");
    require(lr > 0 && lr < 1.0, "trainer.lr must be in (0,1)");
    require(effective_warmup() <= steps, "trainer.warmup_steps must be <= steps");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "trainer betas must be in [0,1)");
    require(adam_eps > 0, "trainer.adam_eps must be > 0");
    require(weight_decay >= 0, "trainer.weight_decay must be >= 0");
    require(grad_clip > 0, "trainer.grad_clip must be > 0");
    require(label_dropout >= 0 && label_dropout < 1, "trainer.label_dropout must be in [0,1)");
    require(lambda_cls >= 0, "trainer.lambda_cls must be >= 0");
    require(cls_noise_mode == "independent" || cls_noise_mode == "coupled",
            "trainer.cls_noise_mode must be independent|coupled");
    require(ema_decay_a >= 0 && ema_decay_a < 1 && ema_decay_b >= 0 && ema_decay_b < 1,
            "trainer EMA decays must be in [0,1)");
    require(sigma_eps > 0, "trainer.sigma_eps must be > 0");
    require(eps_t_clamp > 0 && eps_t_clamp < 1, "trainer.eps_t_clamp must be in (0,1)");
    require(time_shift_s == -1.0 || time_shift_s >= 1.0, "trainer.time_shift_s must be -1 (auto) or >= 1");
    require(t_lo > 0 && t_lo < t_hi && t_hi < 1, "trainer time truncation requires 0 < t_lo < t_hi < 1");
    require(checkpoint_every >= 0, "trainer.checkpoint_every must be >= 0");
    require(data_size >= 4, "trainer.data_size must be >= 4");
    require(train_fraction > 0 && train_fraction < 1, "trainer.train_fraction must be in (0,1)");
    require(spike_reject_factor > 1, "trainer.spike_reject_factor must be > 1");
    require(spike_window >= 3 && spike_min_history >= 1, "trainer spike-rejection window invalid");
}

void SamplerConfig::validate() const {
    require(solver == "euler" || solver == "heun", "sampler.solver must be euler|heun");
    require(schedule == "uniform" || schedule == "cosine" || schedule == "logsnr" || schedule == "edm" ||
                schedule == "power2" || schedule == "timeshift",
            "sampler.schedule must be uniform|cosine|logsnr|edm|power2|timeshift");
    require(steps >= 1, "sampler.steps must be >= 1");
    require(shift_s >= 1.0, "sampler.shift_s must be >= 1");
    require(logsnr_eps > 0 && logsnr_eps < 0.5, "sampler.logsnr_eps must be in (0,0.5)");
    require(edm_sigma_min > 0 && edm_sigma_min < edm_sigma_max, "sampler EDM requires 0 < sigma_min < sigma_max");
    require(edm_rho > 0, "sampler.edm_rho must be > 0");
    require(w >= 0 && w_cls >= 0, "sampler guidance scales must be >= 0");
    require(interval_lo >= 0 && interval_lo <= interval_hi && interval_hi <= 1,
            "sampler guidance interval must satisfy 0 <= lo <= hi <= 1");
    require(cls_init == "independent" || cls_init == "coupled", "sampler.cls_init must be independent|coupled");
    require(sigma_eps > 0, "sampler.sigma_eps must be > 0");
    require(eps_t_clamp > 0 && eps_t_clamp < 1, "sampler.eps_t_clamp must be in (0,1)");
    require(t_max > 0 && t_max <= 1.0, "sampler.t_max must be in (0,1]");
    require(n_samples >= 1, "sampler.n_samples must be >= 1");
    require(ema == "raw" || ema == "0.9999" || ema == "0.9996", "sampler.ema must be raw|0.9999|0.9996");
}

void GeometryConfig::validate() const {
    require(n_samples >= 4, "geometry.n_samples must be >= 4");
    require(pca_components >= 0, "geometry.pca_components must be >= 0");
    require(twonn_subsample >= 3, "geometry.twonn_subsample must be >= 3");
    require(twonn_bootstraps >= 1, "geometry.twonn_bootstraps must be >= 1");
    require(interp_pairs >= 1 && interp_steps >= 2, "geometry interpolation needs pairs >= 1, steps >= 2");
    require(interp_reference >= 100, "geometry.interp_reference must be >= 100");
    require(curve_points >= 2, "geometry.curve_points must be >= 2");
}

void RunConfig::validate() const {
    require(config_version == 1, "unsupported config_version");
    require(experiment == "train" || experiment == "geometry" || experiment == "sample" ||
                experiment == "ablate-schedules" || experiment == "truncation",
            "experiment must be one of train|geometry|sample|ablate-schedules|truncation");
    generator.validate();
    denoiser.validate();
    trainer.validate();
    sampler.validate();
    geometry.validate();
}

namespace {

json generator_to_json(const GeneratorSpec& g) {
    return json{{"kind", g.kind},
                {"channels", g.channels},
                {"grid_h", g.grid_h},
                {"grid_w", g.grid_w},
                {"intrinsic_dim", g.intrinsic_dim},
                {"num_classes", g.num_classes},
                {"cond_target", g.cond_target},
                {"tail_dof", g.tail_dof},
                {"norm_pinning", g.norm_pinning},
                {"class_shift_norm", g.class_shift_norm}};
}

GeneratorSpec generator_from_json(const json& j) {
    GeneratorSpec g;
    check_known_keys(j,
                     {"kind", "channels", "grid_h", "grid_w", "intrinsic_dim", "num_classes", "cond_target",
                      "tail_dof", "norm_pinning", "class_shift_norm"},
                     "generator");
    get_to(j, "kind", g.kind);
    g.apply_kind_defaults();
    get_to(j, "channels", g.channels);
    get_to(j, "grid_h", g.grid_h);
    get_to(j, "grid_w", g.grid_w);
    get_to(j, "intrinsic_dim", g.intrinsic_dim);
    get_to(j, "num_classes", g.num_classes);
    get_to(j, "cond_target", g.cond_target);
    get_to(j, "tail_dof", g.tail_dof);
    get_to(j, "norm_pinning", g.norm_pinning);
    get_to(j, "class_shift_norm", g.class_shift_norm);
    return g;
}

}  // namespace

std::string RunConfig::to_json() const {
    json j;
    j["config_version"] = config_version;
    j["experiment"] = experiment;
    j["seed"] = seed;
    j["generator"] = generator_to_json(generator);
    j["denoiser"] = json{{"hidden_dim", denoiser.hidden_dim}, {"layers", denoiser.layers},
                         {"heads", denoiser.heads},          {"channels", denoiser.channels},
                         {"grid_h", denoiser.grid_h},        {"grid_w", denoiser.grid_w},
                         {"num_classes", denoiser.num_classes}, {"qk_norm", denoiser.qk_norm},
                         {"cls_token", denoiser.cls_token},  {"ffn_mult", denoiser.ffn_mult},
                         {"time_feat_dim", denoiser.time_feat_dim}, {"attn_dropout", denoiser.attn_dropout},
                         {"proj_dropout", denoiser.proj_dropout}};
    j["trainer"] = json{{"mode", trainer.mode},
                        {"steps", trainer.steps},
                        {"batch_size", trainer.batch_size},
                        {"lr", trainer.lr},
                        {"warmup_steps", trainer.warmup_steps},
                        {"beta1", trainer.beta1},
                        {"beta2", trainer.beta2},
                        {"adam_eps", trainer.adam_eps},
                        {"weight_decay", trainer.weight_decay},
                        {"grad_clip", trainer.grad_clip},
                        {"label_dropout", trainer.label_dropout},
                        {"lambda_cls", trainer.lambda_cls},
                        {"cls_noise_mode", trainer.cls_noise_mode},
                        {"ema_decay_a", trainer.ema_decay_a},
                        {"ema_decay_b", trainer.ema_decay_b},
                        {"sigma_eps", trainer.sigma_eps},
                        {"eps_t_clamp", trainer.eps_t_clamp},
                        {"time_shift_s", trainer.time_shift_s},
                        {"t_lo", trainer.t_lo},
                        {"t_hi", trainer.t_hi},
                        {"checkpoint_every", trainer.checkpoint_every},
                        {"data_size", trainer.data_size},
                        {"train_fraction", trainer.train_fraction},
                        {"standardize", trainer.standardize},
                        {"spike_reject_factor", trainer.spike_reject_factor},
                        {"spike_window", trainer.spike_window},
                        {"spike_min_history", trainer.spike_min_history}};
    j["sampler"] = json{{"solver", sampler.solver},
                        {"schedule", sampler.schedule},
                        {"steps", sampler.steps},
                        {"shift_s", sampler.shift_s},
                        {"logsnr_eps", sampler.logsnr_eps},
                        {"edm_sigma_min", sampler.edm_sigma_min},
                        {"edm_sigma_max", sampler.edm_sigma_max},
                        {"edm_rho", sampler.edm_rho},
                        {"guidance", sampler.guidance},
                        {"w", sampler.w},
                        {"w_cls", sampler.w_cls},
                        {"interval_lo", sampler.interval_lo},
                        {"interval_hi", sampler.interval_hi},
                        {"cls_init", sampler.cls_init},
                        {"sigma_eps", sampler.sigma_eps},
                        {"eps_t_clamp", sampler.eps_t_clamp},
                        {"t_max", sampler.t_max},
                        {"n_samples", sampler.n_samples},
                        {"ema", sampler.ema}};
    j["geometry"] = json{{"n_samples", geometry.n_samples},
                         {"pca_components", geometry.pca_components},
                         {"twonn_subsample", geometry.twonn_subsample},
                         {"twonn_bootstraps", geometry.twonn_bootstraps},
                         {"interp_pairs", geometry.interp_pairs},
                         {"interp_steps", geometry.interp_steps},
                         {"interp_reference", geometry.interp_reference},
                         {"curve_points", geometry.curve_points}};
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
    }
    check_known_keys(j, {"config_version", "experiment", "seed", "generator", "denoiser", "trainer", "sampler",
                         "geometry"},
                     "config");
    RunConfig c;
    get_to(j, "config_version", c.config_version);
    get_to(j, "experiment", c.experiment);
    get_to(j, "seed", c.seed);
    if (j.contains("generator")) c.generator = generator_from_json(j.at("generator"));
    if (j.contains("denoiser")) {
        const auto& d = j.at("denoiser");
        check_known_keys(d,
                         {"hidden_dim", "layers", "heads", "channels", "grid_h", "grid_w", "num_classes", "qk_norm",
                          "cls_token", "ffn_mult", "time_feat_dim", "attn_dropout", "proj_dropout"},
                         "denoiser");
        get_to(d, "hidden_dim", c.denoiser.hidden_dim);
        get_to(d, "layers", c.denoiser.layers);
        get_to(d, "heads", c.denoiser.heads);
        get_to(d, "channels", c.denoiser.channels);
        get_to(d, "grid_h", c.denoiser.grid_h);
        get_to(d, "grid_w", c.denoiser.grid_w);
        get_to(d, "num_classes", c.denoiser.num_classes);
        get_to(d, "qk_norm", c.denoiser.qk_norm);
        get_to(d, "cls_token", c.denoiser.cls_token);
        get_to(d, "ffn_mult", c.denoiser.ffn_mult);
        get_to(d, "time_feat_dim", c.denoiser.time_feat_dim);
        get_to(d, "attn_dropout", c.denoiser.attn_dropout);
        get_to(d, "proj_dropout", c.denoiser.proj_dropout);
    }
    if (j.contains("trainer")) {
        const auto& t = j.at("trainer");
        check_known_keys(t,
                         {"mode", "steps", "batch_size", "lr", "warmup_steps", "beta1", "beta2", "adam_eps",
                          "weight_decay", "grad_clip", "label_dropout", "lambda_cls", "cls_noise_mode", "ema_decay_a",
                          "ema_decay_b", "sigma_eps", "eps_t_clamp", "time_shift_s", "t_lo", "t_hi",
                          "checkpoint_every", "data_size", "train_fraction", "standardize", "spike_reject_factor",
                          "spike_window", "spike_min_history"},
                         "trainer");
        get_to(t, "mode", c.trainer.mode);
        get_to(t, "steps", c.trainer.steps);
        get_to(t, "batch_size", c.trainer.batch_size);
        get_to(t, "lr", c.trainer.lr);
        get_to(t, "warmup_steps", c.trainer.warmup_steps);
        get_to(t, "beta1", c.trainer.beta1);
        get_to(t, "beta2", c.trainer.beta2);
        get_to(t, "adam_eps", c.trainer.adam_eps);
        get_to(t, "weight_decay", c.trainer.weight_decay);
        get_to(t, "grad_clip", c.trainer.grad_clip);
        get_to(t, "label_dropout", c.trainer.label_dropout);
        get_to(t, "lambda_cls", c.trainer.lambda_cls);
        get_to(t, "cls_noise_mode", c.trainer.cls_noise_mode);
        get_to(t, "ema_decay_a", c.trainer.ema_decay_a);
        get_to(t, "ema_decay_b", c.trainer.ema_decay_b);
        get_to(t, "sigma_eps", c.trainer.sigma_eps);
        get_to(t, "eps_t_clamp", c.trainer.eps_t_clamp);
        get_to(t, "time_shift_s", c.trainer.time_shift_s);
        get_to(t, "t_lo", c.trainer.t_lo);
        get_to(t, "t_hi", c.trainer.t_hi);
        get_to(t, "checkpoint_every", c.trainer.checkpoint_every);
        get_to(t, "data_size", c.trainer.data_size);
        get_to(t, "train_fraction", c.trainer.train_fraction);
        get_to(t, "standardize", c.trainer.standardize);
        get_to(t, "spike_reject_factor", c.trainer.spike_reject_factor);
        get_to(t, "spike_window", c.trainer.spike_window);
        get_to(t, "spike_min_history", c.trainer.spike_min_history);
    }
    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        check_known_keys(s,
                         {"solver", "schedule", "steps", "shift_s", "logsnr_eps", "edm_sigma_min", "edm_sigma_max",
                          "edm_rho", "guidance", "w", "w_cls", "interval_lo", "interval_hi", "cls_init", "sigma_eps",
                          "eps_t_clamp", "t_max", "n_samples", "ema"},
                         "sampler");
        get_to(s, "solver", c.sampler.solver);
        get_to(s, "schedule", c.sampler.schedule);
        get_to(s, "steps", c.sampler.steps);
        get_to(s, "shift_s", c.sampler.shift_s);
        get_to(s, "logsnr_eps", c.sampler.logsnr_eps);
        get_to(s, "edm_sigma_min", c.sampler.edm_sigma_min);
        get_to(s, "edm_sigma_max", c.sampler.edm_sigma_max);
        get_to(s, "edm_rho", c.sampler.edm_rho);
        get_to(s, "guidance", c.sampler.guidance);
        get_to(s, "w", c.sampler.w);
        get_to(s, "w_cls", c.sampler.w_cls);
        get_to(s, "interval_lo", c.sampler.interval_lo);
        get_to(s, "interval_hi", c.sampler.interval_hi);
        get_to(s, "cls_init", c.sampler.cls_init);
        get_to(s, "sigma_eps", c.sampler.sigma_eps);
        get_to(s, "eps_t_clamp", c.sampler.eps_t_clamp);
        get_to(s, "t_max", c.sampler.t_max);
        get_to(s, "n_samples", c.sampler.n_samples);
        get_to(s, "ema", c.sampler.ema);
    }
    if (j.contains("geometry")) {
        const auto& g = j.at("geometry");
        check_known_keys(g,
                         {"n_samples", "pca_components", "twonn_subsample", "twonn_bootstraps", "interp_pairs",
                          "interp_steps", "interp_reference", "curve_points"},
                         "geometry");
        get_to(g, "n_samples", c.geometry.n_samples);
        get_to(g, "pca_components", c.geometry.pca_components);
        get_to(g, "twonn_subsample", c.geometry.twonn_subsample);
        get_to(g, "twonn_bootstraps", c.geometry.twonn_bootstraps);
        get_to(g, "interp_pairs", c.geometry.interp_pairs);
        get_to(g, "interp_steps", c.geometry.interp_steps);
        get_to(g, "interp_reference", c.geometry.interp_reference);
        get_to(g, "curve_points", c.geometry.curve_points);
    }
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

}  // namespace flowlab
