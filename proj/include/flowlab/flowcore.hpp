#pragma once

#include <cstdint>
#include <vector>

#include "flowlab/rng.hpp"
#include "flowlab/tensor.hpp"

namespace flowlab {

// Per-element mean/std over the training set; the diagonal preconditioner.
// The effective divisor is sqrt(sigma^2 + eps), so constant elements map to 0.
struct StandardizationStats {
    int c = 0, h = 0, w = 0;
    std::vector<float> patch_mean;  // [C,H,W]
    std::vector<float> patch_std;   // [C,H,W]
    std::vector<float> cls_mean;    // [C]
    std::vector<float> cls_std;     // [C]
    static constexpr float eps = 1e-6f;
};

StandardizationStats fit_standardization(const FeatureBatch& train);
FeatureBatch standardize(const FeatureBatch& batch, const StandardizationStats& stats);
FeatureBatch destandardize(const FeatureBatch& batch, const StandardizationStats& stats);

// s = sqrt(h*w*d / 4096)
double compute_shift(int h, int w, int d);

// X' = X s / (1 + (s-1) X), a monotone bijection of [0,1]
double time_shift(double x, double s);
double time_shift_inverse(double x_shifted, double s);

// Truncated logit-normal time sampler with dimension-aware shift:
// X = sigmoid(g), g ~ N(0,1); t = clamp(1 - shift(X), t_lo, t_hi).
struct TimeSampler {
    double s = 1.0;
    double t_lo = 1e-3;
    double t_hi = 0.999;
    void validate() const;
};

std::vector<double> sample_time(const TimeSampler& sampler, int n, Rng& rng);

enum class ClsNoiseMode { independent, coupled };

// One training draw of the forward process z_t = t z_0 + (1-t) eps, with
// targets v = z_0 - eps for both streams.
struct FlowSample {
    int b = 0, c = 0, h = 0, w = 0;
    std::vector<double> t;        // [B]
    std::vector<float> z_t;       // [B,C,H,W]
    std::vector<float> z_cls_t;   // [B,C]
    std::vector<float> v;         // [B,C,H,W]
    std::vector<float> v_cls;     // [B,C]
    std::vector<float> z0;        // [B,C,H,W]
    std::vector<float> z_cls0;    // [B,C]
    std::vector<float> eps;       // [B,C,H,W]
    std::vector<float> eps_cls;   // [B,C]
};

FlowSample make_flow_sample(const FeatureBatch& clean, const std::vector<double>& t, Rng& noise_rng,
                            ClsNoiseMode mode, double sigma_eps = 1.0);

// v_hat = (z0_hat - z_t) / max(1-t, eps_t)
inline double xpred_divisor(double t, double eps_t) { return std::max(1.0 - t, eps_t); }

void xpred_to_velocity(const float* z0_hat, const float* z_t, double t, double eps_t, float* v_hat, size_t n);

// mean squared error over all elements
double loss_fm(const float* v_hat, const float* v, size_t n);
double loss_total(const float* v_hat, const float* v, size_t n, const float* v_cls_hat, const float* v_cls,
                  size_t n_cls, double lambda);

// Both sides of the velocity/x-prediction loss identity, evaluated in
// 64-bit: mean((v_hat - v)^2) and (1-t)^-2 mean((z0_hat - z0)^2).
std::pair<double, double> loss_equivalence_check(const std::vector<double>& z0_hat, const std::vector<double>& z0,
                                                 const std::vector<double>& z_t, double t);

}  // namespace flowlab
