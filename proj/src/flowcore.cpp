#include "flowlab/flowcore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowlab {

namespace {

void fit_elementwise(const float* data, size_t n_samples, size_t dim, float* mean_out, float* std_out) {
    for (size_t j = 0; j < dim; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < n_samples; ++i) acc += data[i * dim + j];
        const double mu = acc / double(n_samples);
        double ss = 0.0;
        for (size_t i = 0; i < n_samples; ++i) {
            const double d = data[i * dim + j] - mu;
            ss += d * d;
        }
        mean_out[j] = static_cast<float>(mu);
        std_out[j] = static_cast<float>(std::sqrt(ss / double(n_samples)));
    }
}

}  // namespace

StandardizationStats fit_standardization(const FeatureBatch& train) {
    if (train.b < 2) throw std::runtime_error("fit_standardization: need at least 2 samples");
    train.check_consistent();
    StandardizationStats s;
    s.c = train.c;
    s.h = train.h;
    s.w = train.w;
    const size_t pd = train.patch_dim();
    s.patch_mean.resize(pd);
    s.patch_std.resize(pd);
    s.cls_mean.resize(train.c);
    s.cls_std.resize(train.c);
    fit_elementwise(train.patches.data(), train.b, pd, s.patch_mean.data(), s.patch_std.data());
    fit_elementwise(train.cls.data(), train.b, train.c, s.cls_mean.data(), s.cls_std.data());
    return s;
}

namespace {

void check_shapes(const FeatureBatch& batch, const StandardizationStats& stats, const char* who) {
    if (batch.c != stats.c || batch.h != stats.h || batch.w != stats.w)
        throw std::runtime_error(std::string(who) + ": shape mismatch with stats");
}

}  // namespace

FeatureBatch standardize(const FeatureBatch& batch, const StandardizationStats& stats) {
    check_shapes(batch, stats, "standardize");
    FeatureBatch out = batch;
    const size_t pd = batch.patch_dim();
    for (int i = 0; i < batch.b; ++i) {
        float* p = out.sample(i);
        for (size_t j = 0; j < pd; ++j)
            p[j] = (p[j] - stats.patch_mean[j]) /
                   std::sqrt(stats.patch_std[j] * stats.patch_std[j] + StandardizationStats::eps);
        float* c = out.cls_row(i);
        for (int j = 0; j < batch.c; ++j)
            c[j] = (c[j] - stats.cls_mean[j]) /
                   std::sqrt(stats.cls_std[j] * stats.cls_std[j] + StandardizationStats::eps);
    }
    return out;
}

FeatureBatch destandardize(const FeatureBatch& batch, const StandardizationStats& stats) {
    check_shapes(batch, stats, "destandardize");
    FeatureBatch out = batch;
    const size_t pd = batch.patch_dim();
    for (int i = 0; i < batch.b; ++i) {
        float* p = out.sample(i);
        for (size_t j = 0; j < pd; ++j)
            p[j] = p[j] * std::sqrt(stats.patch_std[j] * stats.patch_std[j] + StandardizationStats::eps) +
                   stats.patch_mean[j];
        float* c = out.cls_row(i);
        for (int j = 0; j < batch.c; ++j)
            c[j] = c[j] * std::sqrt(stats.cls_std[j] * stats.cls_std[j] + StandardizationStats::eps) +
                   stats.cls_mean[j];
    }
    return out;
}

double compute_shift(int h, int w, int d) {
    if (h < 1 || w < 1 || d < 1) throw std::runtime_error("compute_shift: dims must be >= 1");
    return std::sqrt(double(h) * double(w) * double(d) / 4096.0);
}

double time_shift(double x, double s) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::runtime_error("time_shift: X must be in [0,1]");
    if (!(s > 0.0)) throw std::runtime_error("time_shift: s must be > 0");
    return x * s / (1.0 + (s - 1.0) * x);
}

double time_shift_inverse(double x_shifted, double s) {
    if (!(x_shifted >= 0.0 && x_shifted <= 1.0)) throw std::runtime_error("time_shift_inverse: X' must be in [0,1]");
    return x_shifted / (s - (s - 1.0) * x_shifted);
}

void TimeSampler::validate() const {
    if (!(s >= 1.0)) throw std::runtime_error("TimeSampler: s must be >= 1");
    if (!(t_lo > 0.0 && t_lo < t_hi && t_hi < 1.0))
        throw std::runtime_error("TimeSampler: require 0 < t_lo < t_hi < 1");
}

std::vector<double> sample_time(const TimeSampler& sampler, int n, Rng& rng) {
    sampler.validate();
    if (n < 1) throw std::runtime_error("sample_time: n must be >= 1");
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) {
        const double g = rng.normal();
        const double x = 1.0 / (1.0 + std::exp(-g));
        const double xs = time_shift(x, sampler.s);
        t[i] = std::clamp(1.0 - xs, sampler.t_lo, sampler.t_hi);
    }
    return t;
}

FlowSample make_flow_sample(const FeatureBatch& clean, const std::vector<double>& t, Rng& noise_rng,
                            ClsNoiseMode mode, double sigma_eps) {
    clean.check_consistent();
    if (t.size() != static_cast<size_t>(clean.b)) throw std::runtime_error("make_flow_sample: t size mismatch");
    for (double ti : t)
        if (!(ti > 0.0 && ti < 1.0)) throw std::runtime_error("make_flow_sample: t outside (0,1)");

    FlowSample fs;
    fs.b = clean.b;
    fs.c = clean.c;
    fs.h = clean.h;
    fs.w = clean.w;
    fs.t = t;
    const size_t pd = clean.patch_dim();
    fs.z0 = clean.patches;
    fs.z_cls0 = clean.cls;
    fs.eps.resize(fs.z0.size());
    fs.eps_cls.resize(fs.z_cls0.size());
    fs.z_t.resize(fs.z0.size());
    fs.z_cls_t.resize(fs.z_cls0.size());
    fs.v.resize(fs.z0.size());
    fs.v_cls.resize(fs.z_cls0.size());

    const int hw = clean.h * clean.w;
    for (int i = 0; i < clean.b; ++i) {
        float* eps = fs.eps.data() + i * pd;
        for (size_t j = 0; j < pd; ++j) eps[j] = static_cast<float>(sigma_eps * noise_rng.normal());

        float* eps_cls = fs.eps_cls.data() + static_cast<size_t>(i) * clean.c;
        if (mode == ClsNoiseMode::independent) {
            for (int j = 0; j < clean.c; ++j) eps_cls[j] = static_cast<float>(sigma_eps * noise_rng.normal());
        } else {
            // coupled: eps_cls = mean over the grid of the patch noise
            for (int c = 0; c < clean.c; ++c) {
                double acc = 0.0;
                for (int k = 0; k < hw; ++k) acc += eps[c * hw + k];
                eps_cls[c] = static_cast<float>(acc / hw);
            }
        }

        const float ti = static_cast<float>(t[i]);
        const float* z0 = fs.z0.data() + i * pd;
        float* zt = fs.z_t.data() + i * pd;
        float* v = fs.v.data() + i * pd;
        for (size_t j = 0; j < pd; ++j) {
            zt[j] = ti * z0[j] + (1.0f - ti) * eps[j];
            v[j] = z0[j] - eps[j];
        }
        const float* zc0 = fs.z_cls0.data() + static_cast<size_t>(i) * clean.c;
        float* zct = fs.z_cls_t.data() + static_cast<size_t>(i) * clean.c;
        float* vc = fs.v_cls.data() + static_cast<size_t>(i) * clean.c;
        for (int j = 0; j < clean.c; ++j) {
            zct[j] = ti * zc0[j] + (1.0f - ti) * eps_cls[j];
            vc[j] = zc0[j] - eps_cls[j];
        }
    }
    return fs;
}

void xpred_to_velocity(const float* z0_hat, const float* z_t, double t, double eps_t, float* v_hat, size_t n) {
    if (!(eps_t > 0.0)) throw std::runtime_error("xpred_to_velocity: eps_t must be > 0");
    const float inv = static_cast<float>(1.0 / xpred_divisor(t, eps_t));
    for (size_t j = 0; j < n; ++j) v_hat[j] = (z0_hat[j] - z_t[j]) * inv;
}

double loss_fm(const float* v_hat, const float* v, size_t n) {
    double acc = 0.0;
    for (size_t j = 0; j < n; ++j) {
        const double d = double(v_hat[j]) - double(v[j]);
        acc += d * d;
    }
    return acc / double(n);
}

double loss_total(const float* v_hat, const float* v, size_t n, const float* v_cls_hat, const float* v_cls,
                  size_t n_cls, double lambda) {
    return loss_fm(v_hat, v, n) + lambda * loss_fm(v_cls_hat, v_cls, n_cls);
}

std::pair<double, double> loss_equivalence_check(const std::vector<double>& z0_hat, const std::vector<double>& z0,
                                                 const std::vector<double>& z_t, double t) {
    if (z0_hat.size() != z0.size() || z0.size() != z_t.size())
        throw std::runtime_error("loss_equivalence_check: size mismatch");
    const size_t n = z0.size();
    double lhs = 0.0, rhs = 0.0;
    const double inv = 1.0 / (1.0 - t);
    for (size_t j = 0; j < n; ++j) {
        const double v = (z0[j] - z_t[j]) * inv;
        const double v_hat = (z0_hat[j] - z_t[j]) * inv;
        lhs += (v_hat - v) * (v_hat - v);
        const double dx = z0_hat[j] - z0[j];
        rhs += dx * dx;
    }
    lhs /= double(n);
    rhs = rhs / double(n) * inv * inv;
    return {lhs, rhs};
}

}  // namespace flowlab
