#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flowlab/config.hpp"

namespace flowlab {

// Eigenvalues of the centered sample covariance (N-1 divisor), descending,
// with normalized weights lambda_hat summing to 1 over the retained k.
struct Spectrum {
    std::vector<double> eigenvalues;
    std::vector<double> normalized;
    double total_variance = 0.0;  // trace over retained components
};

struct KurtosisSummary {
    double mean_abs = 0.0;
    double median_abs = 0.0;
    double frac_below_half = 0.0;
    double frac_below_one = 0.0;
    int constant_dims = 0;  // dimensions with zero variance, reported as kappa=0
};

struct TwoNNResult {
    double mean = 0.0;
    double std = 0.0;
    std::vector<double> per_bootstrap;
    int dropped_duplicates = 0;
};

struct GeometryReport {
    double effective_rank = 0.0;
    double intrinsic_dim_mean = 0.0;
    double intrinsic_dim_std = 0.0;
    KurtosisSummary kurtosis;
    std::vector<std::pair<double, double>> conditioning_curve;  // (t, kappa)
    double interpolation_mse = 0.0;  // mean over interior frames; 0 if not run
    std::vector<std::pair<double, double>> interpolation_curve;  // (t, mean sq dist)
    int64_t sample_count = 0;
    int spectrum_components = 0;
    int twonn_dropped_duplicates = 0;
    std::string kurtosis_estimator = "population-moment";
};

// Top-k covariance eigenvalues via the smaller of the DxD covariance or the
// NxN Gram matrix. data is N x D (rows = samples).
Spectrum pca_spectrum(const Eigen::MatrixXd& data, int k);

// exp(-sum lambda_hat_i log lambda_hat_i); zero eigenvalues excluded.
double effective_rank(const Spectrum& spec);

// TwoNN intrinsic-dimension MLE over bootstrapped subsamples; distances are
// exact Euclidean, computed in chunks. Duplicate points within a subsample
// are dropped.
TwoNNResult twonn(const Eigen::MatrixXd& data, int subsample, int bootstraps, uint64_t seed);

// Per-dimension excess kurtosis with population moments; constant dimensions
// report 0 and are counted separately.
std::vector<double> excess_kurtosis(const Eigen::MatrixXd& data, int* constant_dims = nullptr);
KurtosisSummary summarize_kurtosis(const std::vector<double>& kappa, int constant_dims);

// kappa(Sigma_t) for Sigma_t = (1-t)^2 I + t^2 H, from the retained spectrum
// of H. lambda_min is the smallest retained eigenvalue floored at 1e-12;
// t = 1 with a non-positive raw lambda_min reports +inf.
std::vector<std::pair<double, double>> conditioning_curve(const Spectrum& spec, const std::vector<double>& t_points);

// Squared distance to the manifold along linear chords z_t = (1-t) z_a + t z_b,
// averaged over pairs, per frame. The oracle returns Euclidean distance to the
// manifold; `tolerance` bounds how far the endpoints may sit off-manifold.
using ManifoldOracle = std::function<double(const Eigen::VectorXd&)>;
std::vector<std::pair<double, double>> interpolation_score(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs, int steps, const ManifoldOracle& oracle,
    double tolerance);

// Runs every diagnostic over a flattened feature set with shared centering.
// The interpolation score is filled by callers that have a manifold oracle.
GeometryReport geometry_report(const Eigen::MatrixXd& data, const GeometryConfig& config, uint64_t seed);

std::string report_to_json(const GeometryReport& r);

}  // namespace flowlab
