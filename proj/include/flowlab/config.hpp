#pragma once

#include <cstdint>
#include <string>

namespace flowlab {

// Class-conditional synthetic distribution with controllable geometry.
// Kinds: shell (near-isotropic, norm-pinned tokens), mid (intermediate),
// spiky (anisotropic, heavy-tailed), gmm2d (8-mode ring mixture sanity set).
struct GeneratorSpec {
    std::string kind = "shell";
    int channels = 8;
    int grid_h = 4;
    int grid_w = 4;
    int intrinsic_dim = 8;
    int num_classes = 8;
    double cond_target = 2.0;   // condition number of the stacked embedding
    double tail_dof = 0.0;      // Student-t dof for latents; 0 = Gaussian
    bool norm_pinning = true;   // pin each token to ||z||^2 = C
    double class_shift_norm = 2.0;
    uint64_t seed = 0;

    int ambient_dim() const { return channels * grid_h * grid_w; }
    void apply_kind_defaults();  // fills the knobs above from `kind`
    void validate() const;
};

struct DenoiserConfig {
    int hidden_dim = 64;
    int layers = 4;
    int heads = 4;
    int channels = 8;
    int grid_h = 4;
    int grid_w = 4;
    int num_classes = 8;  // null class index == num_classes
    bool qk_norm = true;
    bool cls_token = true;
    int ffn_mult = 4;
    int time_feat_dim = 64;
    double attn_dropout = 0.0;  // applied in the middle half of the layers
    double proj_dropout = 0.0;
    void validate() const;
};

struct TrainConfig {
    std::string mode = "x";  // "x" or "v" prediction
    int steps = 2000;
    int batch_size = 32;
    double lr = 1e-3;
    int warmup_steps = -1;  // -1: 5% of steps
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double label_dropout = 0.1;
    double lambda_cls = 0.2;
    std::string cls_noise_mode = "independent";  // training-time CLS noise
    double ema_decay_a = 0.9999;
    double ema_decay_b = 0.9996;
    double sigma_eps = 1.0;   // noise scale
    double eps_t_clamp = 0.05;
    double time_shift_s = -1.0;  // -1: max(1, sqrt(H*W*C/4096))
    double t_lo = 1e-3;
    double t_hi = 0.999;
    int checkpoint_every = 0;  // 0: final checkpoint only
    int data_size = 20000;
    double train_fraction = 0.9;
    bool standardize = true;  // false: identity stats (the "raw features" ablation)
    double spike_reject_factor = 1e3;
    int spike_window = 101;
    int spike_min_history = 20;
    void validate() const;
    int effective_warmup() const;
};

struct SamplerConfig {
    std::string solver = "heun";        // euler | heun
    std::string schedule = "timeshift";  // uniform | cosine | logsnr | edm | power2 | timeshift
    int steps = 25;
    double shift_s = 4.9;
    double logsnr_eps = 1e-3;
    double edm_sigma_min = 0.002;
    double edm_sigma_max = 80.0;
    double edm_rho = 7.0;
    bool guidance = false;
    double w = 3.7;
    double w_cls = 3.7;
    double interval_lo = 0.1;
    double interval_hi = 0.98;
    std::string cls_init = "independent";  // independent | coupled
    double sigma_eps = 1.0;
    double eps_t_clamp = 0.05;
    double t_max = 1.0;  // grids are clamped into [0, t_max]
    int n_samples = 1000;
    std::string ema = "0.9999";  // raw | 0.9999 | 0.9996
    void validate() const;
};

struct GeometryConfig {
    int n_samples = 20000;
    int pca_components = 0;  // 0: min(N, D, 512)
    int twonn_subsample = 5000;
    int twonn_bootstraps = 10;
    int interp_pairs = 100;
    int interp_steps = 11;
    int interp_reference = 50000;
    int curve_points = 100;  // t = 0, 0.01, ..., 0.99
    void validate() const;
};

// Top-level run configuration. Serialized as versioned JSON (see README for
// the documented schema); `seed` drives every pseudo-random choice through
// named sub-streams.
struct RunConfig {
    int config_version = 1;
    std::string experiment = "train";
    uint64_t seed = 1234;
    GeneratorSpec generator;
    DenoiserConfig denoiser;
    TrainConfig trainer;
    SamplerConfig sampler;
    GeometryConfig geometry;

    void validate() const;
    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    static RunConfig from_file(const std::string& path);
};

}  // namespace flowlab
