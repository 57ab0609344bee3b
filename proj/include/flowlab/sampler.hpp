#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "flowlab/config.hpp"
#include "flowlab/denoiser.hpp"
#include "flowlab/flowcore.hpp"
#include "flowlab/tensor.hpp"

namespace flowlab {

// Ordered ODE timesteps t_0 < ... < t_K produced by one of the six schedule
// rules, clamped into [0, t_max].
struct TimeGrid {
    std::string kind;
    std::vector<double> knots;
    void validate() const;
};

TimeGrid make_grid(const std::string& kind, int K, const SamplerConfig& params);

struct GuidanceConfig {
    bool enabled = false;
    double w = 3.7;
    double w_cls = 3.7;
    double lo = 0.1;
    double hi = 0.98;
};

// Velocity field on standardized features; trajectories are advanced jointly
// for the patch grid and the CLS vector.
class VelocityField {
  public:
    virtual ~VelocityField() = default;
    virtual int channels() const = 0;
    virtual int grid_h() const = 0;
    virtual int grid_w() const = 0;
    virtual void eval(int B, const float* z, const float* z_cls, double t, const int32_t* labels, float* v,
                      float* v_cls) = 0;
};

// Denoiser-backed field in x- or v-parameterization. With guidance enabled
// and t inside the interval, combines conditional and null-class branches as
// v_u + w (v_c - v_u); outside the interval (or at w = 1) the conditional
// branch is used directly, bit-identically to guidance off.
class DenoiserField : public VelocityField {
  public:
    DenoiserField(const Denoiser* net, const std::vector<float>* params, std::string mode, double eps_t,
                  GuidanceConfig guidance);
    int channels() const override;
    int grid_h() const override;
    int grid_w() const override;
    void eval(int B, const float* z, const float* z_cls, double t, const int32_t* labels, float* v,
              float* v_cls) override;

  private:
    const Denoiser* net_;
    const std::vector<float>* params_;  // raw or EMA weights
    std::string mode_;
    double eps_t_;
    GuidanceConfig guidance_;
    void eval_branch(int B, const float* z, const float* z_cls, double t, const int32_t* labels, float* v,
                     float* v_cls);
};

// ODE integration from grid.front() to grid.back(). Initial state is
// sigma_eps * N(0, I); CLS noise either independent or coupled
// (eps_cls = grid mean of the patch noise). Output is destandardized when
// stats are provided; CLS is returned for inspection alongside the patches.
FeatureBatch integrate(VelocityField& field, const TimeGrid& grid, const std::vector<int32_t>& labels,
                       uint64_t noise_seed, const std::string& solver, const std::string& cls_init, double sigma_eps,
                       const StandardizationStats* stats);

struct TruncationRow {
    int k = 0;
    double mean = 0.0;
    double std = 0.0;
};

// Heun endpoints at each K in k_list against the K_ref endpoint from matched
// (noise, label) pairs; Frobenius distances in destandardized feature space.
std::vector<TruncationRow> truncation_study(VelocityField& field, const std::string& schedule,
                                            const SamplerConfig& params, const std::vector<int>& k_list, int k_ref,
                                            int n, uint64_t seed, int num_classes,
                                            const StandardizationStats* stats);

// Unbiased MMD^2 with a Gaussian kernel; bandwidth is the median pairwise
// distance of the reference set.
double mmd_metric(const Eigen::MatrixXd& generated, const Eigen::MatrixXd& reference);

struct MmdTestResult {
    double mmd = 0.0;
    double null_q95 = 0.0;
    std::vector<double> null_values;
};

MmdTestResult mmd_permutation_test(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int n_permutations,
                                   uint64_t seed);

// Fraction of samples whose nearest prototype matches their label.
double prototype_accuracy(const Eigen::MatrixXd& generated, const std::vector<int32_t>& labels,
                          const Eigen::MatrixXd& class_prototypes);

// least-squares slope of log(err) against log(k)
double loglog_slope(const std::vector<int>& k, const std::vector<double>& err);

}  // namespace flowlab
